"""Streaming runtime: audio windowing, block scheduling and the two-stage
denoise/decode pipeline with latency and throughput instrumentation.

Two clocks are available. ``clock="virtual"`` advances a simulated clock by
the configured stage delays and is fully deterministic, which makes the
reported timings reproducible. ``clock="wall"`` runs real worker threads
with a bounded handoff queue and measures ``time.perf_counter_ns``.
Pixels never depend on the clock, the pipeline mode or the delays.
"""

from __future__ import annotations

import csv
import io
import json
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cache import AHISCache, CacheOrderError, KVEntry, cache_context, cache_insert
from .causal_student import SamplerGrid, few_step_sample_block, rollout_video
from .diffusion_core import GaussianWorld, MultimodalCondition, NoiseSchedule
from .rng import substream

__all__ = [
    "AHISCache", "CacheOrderError", "KVEntry", "cache_context", "cache_insert",
    "AudioWindower", "window_audio", "decode_block", "StageDelays", "StageTiming",
    "StreamReport", "StreamResult", "StreamAborted", "run_stream", "ZeroNoise",
    "identity_drift_probe", "DEFAULT_CACHE_POLICIES",
]

NS = 1_000_000_000


class StreamAborted(RuntimeError):
    pass


# --------------------------------------------------------------------------
# audio windowing
# --------------------------------------------------------------------------


class AudioWindower:
    """Buffers pushed audio frames and cuts overlapping per-block windows."""

    def __init__(self, frames_per_block: int = 3, pre_context: int = 3, look_ahead: int = 3):
        if frames_per_block < 1 or pre_context < 0 or look_ahead < 0:
            raise ValueError("invalid windowing parameters")
        self.b = frames_per_block
        self.pre_context = pre_context
        self.look_ahead = look_ahead
        self._frames: list = []
        self.ended = False

    @property
    def arrived(self) -> int:
        return len(self._frames)

    def push(self, frames) -> None:
        if self.ended:
            raise ValueError("stream already ended")
        self._frames.extend(float(v) for v in np.atleast_1d(frames))

    def end(self) -> None:
        self.ended = True

    def needed(self, j: int) -> int:
        """Number of arrived frames block ``j`` waits for."""
        return (j + 1) * self.b + self.look_ahead

    def ready(self, j: int) -> bool:
        if self.ended:
            return j * self.b < self.arrived
        return self.arrived >= self.needed(j)

    def window(self, j: int):
        """Clamped window ``[j b - pre, (j + 1) b + look)`` or None if not ready."""
        if not self.ready(j):
            return None
        lo = j * self.b - self.pre_context
        hi = min(self.needed(j), self.arrived)
        pad = max(0, -lo)
        body = np.asarray(self._frames[max(lo, 0) : hi], dtype=float)
        return np.concatenate([np.zeros(pad), body])


def window_audio(w: AudioWindower, block_index: int):
    return w.window(block_index)


# --------------------------------------------------------------------------
# decode
# --------------------------------------------------------------------------


def decode_block(latent, decoder, delay_s: float = 0.0, sleep=None) -> np.ndarray:
    """Linear decode ``latent (b, d) @ decoder (d, p)`` after an artificial delay."""
    if delay_s > 0 and sleep is not None:
        sleep(delay_s)
    return np.asarray(latent, dtype=float) @ np.asarray(decoder, dtype=float)


def make_decoder(d: int, p: int | None = None, seed: int = 0) -> np.ndarray:
    p = d if p is None else p
    return substream(seed, "decoder").normal(0.0, 1.0 / np.sqrt(d), (d, p))


# --------------------------------------------------------------------------
# timing records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StageDelays:
    denoise_s: float = 0.0
    decode_s: float = 0.0

    def __post_init__(self):
        if self.denoise_s < 0 or self.decode_s < 0:
            raise ValueError("stage delays must be non-negative")


@dataclass
class StageTiming:
    block_index: int
    audio_ready: int = 0
    denoise_start: int = 0
    denoise_end: int = 0
    decode_start: int = 0
    decode_end: int = 0
    emit: int = 0

    def is_monotone(self) -> bool:
        seq = (self.audio_ready, self.denoise_start, self.denoise_end, self.decode_start, self.decode_end, self.emit)
        return all(a <= b for a, b in zip(seq, seq[1:]))


REPORT_FIELDS = ("mode", "clock", "blocks", "first_frame_latency_s", "throughput_fps", "steady_state_period_s", "stall_count")


@dataclass
class StreamReport:
    mode: str
    clock: str
    blocks: int
    first_frame_latency_s: float
    throughput_fps: float
    steady_state_period_s: float
    stall_count: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        writer.writerow([_fmt(getattr(self, f)) for f in REPORT_FIELDS])
        return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def summarize(timings, mode: str, clock: str, b: int, fps: float, first_audio_ns: int = 0, warmup: int | None = None) -> StreamReport:
    """Latency, steady-state period, throughput and stalls from block timestamps.

    The steady-state period averages emission gaps after ``warmup`` blocks
    (default: a fifth of the stream, at least one). A stall is an emission
    after its playback deadline ``emit_0 + j * b / fps``.
    """
    n = len(timings)
    if n == 0:
        return StreamReport(mode, clock, 0, 0.0, 0.0, 0.0, 0)
    emits = np.array([t.emit for t in timings], dtype=np.int64)
    latency = (emits[0] - first_audio_ns) / NS
    if n > 1:
        k0 = max(1, n // 5) if warmup is None else min(warmup, n - 2)
        period = (emits[-1] - emits[k0]) / (n - 1 - k0) / NS
    else:
        period = 0.0
    throughput = b / period if period > 0 else 0.0
    block_ns = b / fps * NS
    deadlines = emits[0] + np.arange(n) * block_ns
    stalls = int(np.sum(emits[1:] > deadlines[1:] + 1e-6))
    return StreamReport(mode, clock, n, float(latency), float(throughput), float(period), stalls)


# --------------------------------------------------------------------------
# engine
# --------------------------------------------------------------------------


@dataclass
class StreamResult:
    pixels: list
    report: StreamReport
    timings: list
    events: list = field(default_factory=list)
    latents: list = field(default_factory=list)

    def event_log(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def pixel_array(self) -> np.ndarray:
        return np.concatenate(self.pixels, axis=0) if self.pixels else np.zeros((0, 0))


class _Denoiser:
    """Owns the cache; turns ready audio windows into clean latent blocks."""

    def __init__(self, gen, text_emb, img_emb, cache, grid, sched, sample_mode, seed, b, windower):
        self.gen, self.cache, self.grid, self.sched = gen, cache, grid, sched
        self.text_emb = np.asarray(text_emb, dtype=float)
        self.img_emb = np.asarray(img_emb, dtype=float)
        self.sample_mode, self.seed, self.b, self.w = sample_mode, seed, b, windower

    def condition(self, j: int) -> MultimodalCondition:
        win = self.w.window(j)
        audio = np.zeros((j + 1) * self.b)
        start = j * self.b - self.w.pre_context
        lo = max(start, 0)
        audio[lo : (j + 1) * self.b] = win[lo - start : (j + 1) * self.b - start]
        return MultimodalCondition(self.text_emb, self.img_emb, audio)

    def __call__(self, j: int) -> np.ndarray:
        c = self.condition(j)
        ctx = cache_context(self.cache)
        if len(ctx) > self.cache.capacity:
            raise AssertionError("context exceeds the cache budget")
        rng = substream(self.seed, "stream-block", j)
        block, _ = few_step_sample_block(self.gen, c, ctx, self.grid, self.sched, rng, self.sample_mode, j, (), self.b)
        if not np.all(np.isfinite(block)):
            raise StreamAborted(f"non-finite latents in block {j}")
        cache_insert(self.cache, KVEntry(j, block))
        return block


def _arrival_ns(n_frames: int, audio_fps: float | None) -> np.ndarray:
    if audio_fps is None:
        return np.zeros(n_frames, dtype=np.int64)
    return np.round(np.arange(n_frames) / audio_fps * NS).astype(np.int64)


def run_stream(
    gen,
    c_static,
    audio,
    cache: AHISCache | None = None,
    pipeline_mode: str = "pipelined",
    delays: StageDelays | None = None,
    grid: SamplerGrid | None = None,
    sched: NoiseSchedule | None = None,
    decoder=None,
    b: int = 3,
    windower: AudioWindower | None = None,
    clock: str = "virtual",
    audio_fps: float | None = None,
    playback_fps: float = 16.0,
    handoff_depth: int = 1,
    sample_mode: str = "deterministic",
    seed: int = 0,
    max_threads: int | None = None,
) -> StreamResult:
    """Stream ``audio`` through the student block by block.

    ``c_static`` supplies ``text_emb`` and ``img_emb`` (a condition or a
    mapping). ``audio_fps=None`` makes all audio available at time zero;
    otherwise frame ``f`` arrives at ``f / audio_fps`` seconds.
    """
    if pipeline_mode not in ("sequential", "pipelined"):
        raise ValueError(f"unknown pipeline mode {pipeline_mode!r}")
    if clock not in ("virtual", "wall"):
        raise ValueError(f"unknown clock {clock!r}")
    if handoff_depth < 1:
        raise ValueError("handoff depth must be >= 1")
    delays = delays or StageDelays()
    grid = grid or SamplerGrid()
    sched = sched or NoiseSchedule(grid.n_teacher_steps)
    cache = AHISCache() if cache is None else cache
    windower = windower or AudioWindower(b)
    if windower.b != b:
        raise ValueError("windower block size differs from the stream block size")
    text, img = _static(c_static)
    d = gen.d if hasattr(gen, "d") else gen.world.d
    decoder = np.eye(d) if decoder is None else np.asarray(decoder, dtype=float)
    audio = np.asarray(audio, dtype=float)
    n_blocks = len(audio) // b
    arrival = _arrival_ns(len(audio), audio_fps)
    denoise = _Denoiser(gen, text, img, cache, grid, sched, sample_mode, seed, b, windower)
    if max_threads is None:
        max_threads = int(os.environ.get("STREAMFORGE_THREADS", "2"))
    args = (denoise, windower, audio, arrival, n_blocks, decoder, delays, pipeline_mode, handoff_depth)
    if clock == "virtual":
        pixels, latents, timings, events = _run_virtual(*args)
    elif pipeline_mode == "pipelined" and max_threads >= 2:
        pixels, latents, timings, events = _run_threaded(*args)
    else:
        pixels, latents, timings, events = _run_wall_sequential(*args)
    first = int(arrival[0]) if len(arrival) else 0
    report = summarize(timings, pipeline_mode, clock, b, playback_fps, first)
    return StreamResult(pixels, report, timings, events, latents)


def _static(c):
    if isinstance(c, MultimodalCondition):
        return c.text_emb, c.img_emb
    return c["text_emb"], c["img_emb"]


def _push_until(windower: AudioWindower, audio, arrival, now_ns: int, pushed: int) -> int:
    """Deliver every frame that has arrived by ``now_ns``; returns the new count."""
    n = len(audio)
    hi = int(np.searchsorted(arrival, now_ns, side="right"))
    if hi > pushed:
        windower.push(audio[pushed:hi])
    if hi >= n and not windower.ended:
        windower.end()
    return max(hi, pushed)


def _ready_time(windower: AudioWindower, arrival, j: int) -> int:
    last = min(windower.needed(j), len(arrival)) - 1
    return int(arrival[last])


def _event(j, stage, t0, t1):
    return {"block_index": j, "stage": stage, "t_start_ns": int(t0), "t_end_ns": int(t1)}


def _run_virtual(denoise, windower, audio, arrival, n_blocks, decoder, delays, mode, depth):
    td = int(round(delays.denoise_s * NS))
    tc = int(round(delays.decode_s * NS))
    pixels, latents, timings, events = [], [], [], []
    pushed = 0
    den_free = 0  # denoiser may start its next block
    dec_end = 0
    takes = []  # times the decoder took each block from the handoff
    for j in range(n_blocks):
        ready = _ready_time(windower, arrival, j)
        start = max(ready, den_free)
        pushed = _push_until(windower, audio, arrival, start, pushed)
        try:
            block = denoise(j)
        except StreamAborted:
            events.append(_event(j, "abort", start, start))
            raise
        end = start + td
        if mode == "sequential":
            put = take = end
        else:
            put = max(end, takes[j - depth]) if j >= depth else end
            take = max(put, dec_end)
        dec_start = take
        dec_end = dec_start + tc
        takes.append(take)
        den_free = dec_end if mode == "sequential" else put
        pixels.append(decode_block(block, decoder))
        latents.append(block)
        timings.append(StageTiming(j, ready, start, end, dec_start, dec_end, dec_end))
        events += [_event(j, "denoise", start, end), _event(j, "decode", dec_start, dec_end), _event(j, "emit", dec_end, dec_end)]
    return pixels, latents, timings, events


def _sleep_until(deadline_ns: int) -> None:
    while True:
        left = deadline_ns - time.perf_counter_ns()
        if left <= 0:
            return
        time.sleep(left / NS)


def _wall_denoise(denoise, windower, audio, arrival, j, t0, pushed, td):
    ready = t0 + _ready_time(windower, arrival, j)
    _sleep_until(ready)
    start = time.perf_counter_ns()
    pushed = _push_until(windower, audio, arrival, start - t0, pushed)
    block = denoise(j)
    _sleep_until(start + td)
    return block, ready, start, time.perf_counter_ns(), pushed


def _run_wall_sequential(denoise, windower, audio, arrival, n_blocks, decoder, delays, mode, depth):
    td = int(round(delays.denoise_s * NS))
    tc = int(round(delays.decode_s * NS))
    pixels, latents, timings, events = [], [], [], []
    pushed = 0
    t0 = time.perf_counter_ns()
    for j in range(n_blocks):
        block, ready, start, end, pushed = _wall_denoise(denoise, windower, audio, arrival, j, t0, pushed, td)
        ds = time.perf_counter_ns()
        px = decode_block(block, decoder)
        _sleep_until(ds + tc)
        de = time.perf_counter_ns()
        pixels.append(px)
        latents.append(block)
        timings.append(StageTiming(j, ready - t0, start - t0, end - t0, ds - t0, de - t0, de - t0))
        events += [_event(j, "denoise", start - t0, end - t0), _event(j, "decode", ds - t0, de - t0), _event(j, "emit", de - t0, de - t0)]
    return pixels, latents, timings, events


def _run_threaded(denoise, windower, audio, arrival, n_blocks, decoder, delays, mode, depth):
    td = int(round(delays.denoise_s * NS))
    tc = int(round(delays.decode_s * NS))
    handoff: queue.Queue = queue.Queue(maxsize=depth)
    out = [None] * n_blocks
    failure = []
    t0 = time.perf_counter_ns()

    def denoise_worker():
        pushed = 0
        try:
            for j in range(n_blocks):
                block, ready, start, end, pushed = _wall_denoise(denoise, windower, audio, arrival, j, t0, pushed, td)
                handoff.put((j, block, ready, start, end))
        except BaseException as exc:  # forwarded to the coordinator
            failure.append(exc)
        finally:
            handoff.put(None)

    def decode_worker():
        while True:
            item = handoff.get()
            if item is None:
                return
            j, block, ready, start, end = item
            ds = time.perf_counter_ns()
            px = decode_block(block, decoder)
            _sleep_until(ds + tc)
            out[j] = (px, block, StageTiming(j, ready - t0, start - t0, end - t0, ds - t0, time.perf_counter_ns() - t0, 0))

    workers = [threading.Thread(target=denoise_worker, name="denoise"), threading.Thread(target=decode_worker, name="decode")]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    if failure:
        raise failure[0]
    pixels, latents, timings, events = [], [], [], []
    for px, block, tm in out:
        tm.emit = tm.decode_end
        pixels.append(px)
        latents.append(block)
        timings.append(tm)
        j = tm.block_index
        events += [_event(j, "denoise", tm.denoise_start, tm.denoise_end), _event(j, "decode", tm.decode_start, tm.decode_end), _event(j, "emit", tm.emit, tm.emit)]
    return pixels, latents, timings, events


# --------------------------------------------------------------------------
# identity drift
# --------------------------------------------------------------------------


class ZeroNoise:
    """RNG stand-in returning zeros; an affine sampler then outputs its mean."""

    def standard_normal(self, shape):
        return np.zeros(shape)


DEFAULT_CACHE_POLICIES = (("ahis(3,2)", 3, 2), ("sliding(0,5)", 0, 5), ("unbounded", 0, None))


def identity_drift_probe(gen, world: GaussianWorld, c: MultimodalCondition, num_blocks: int = 100, policies=DEFAULT_CACHE_POLICIES, grid=None, sched=None, mode="deterministic", b: int = 3) -> dict:
    """Per-block distance between the generated block mean and the world mean.

    The student is affine in its injected noise, so running it on zero noise
    yields the exact mean of its output. Returns ``{label: curve}``.
    """
    grid = grid or SamplerGrid()
    sched = sched or NoiseSchedule(grid.n_teacher_steps)
    if c.num_frames < num_blocks * b:
        raise ValueError(f"condition has {c.num_frames} frames, {num_blocks} blocks need {num_blocks * b}")
    mu = world.mean(c)[: num_blocks * b].reshape(num_blocks, b, -1)
    curves = {}
    for label, sinks, rolling in policies:
        mean = rollout_video(gen, c, num_blocks, AHISCache(sinks, rolling), grid, sched, ZeroNoise(), mode, (), b)
        diff = mean.reshape(num_blocks, b, -1) - mu
        curves[label] = np.sqrt(np.sum(diff * diff, axis=(1, 2)))
    return curves


def timings_table(timings) -> list:
    return [asdict(t) for t in timings]

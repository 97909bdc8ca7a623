"""Wall-clock sequential vs pipelined streaming with synthetic stage delays.

Usage: python3 scripts/bench_pipeline.py [--denoise 0.03] [--decode 0.02] [--blocks 50]
"""

import argparse

import numpy as np

from streamforge.cache import AHISCache
from streamforge.causal_student import StudentParams
from streamforge.condition_pipeline import make_condition, smooth_audio
from streamforge.rng import substream
from streamforge.streaming_engine import StageDelays, run_stream


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--denoise", type=float, default=0.03)
    ap.add_argument("--decode", type=float, default=0.02)
    ap.add_argument("--blocks", type=int, default=50)
    ap.add_argument("--clock", choices=("wall", "virtual"), default="wall")
    a = ap.parse_args()
    gen = StudentParams.init(substream(0, "bench"), 4, 8, 4, 0.3)
    c = make_condition(substream(0, "bench-c"), "clean", 21, 4)
    audio = smooth_audio(substream(0, "bench-audio"), 3 * a.blocks)
    delays = StageDelays(a.denoise, a.decode)
    out = {}
    for mode in ("sequential", "pipelined"):
        res = run_stream(gen, c, audio, AHISCache(3, 2), mode, delays, clock=a.clock)
        out[mode] = res
        r = res.report
        print(f"{mode:<11} period {r.steady_state_period_s * 1e3:7.2f} ms  latency {r.first_frame_latency_s * 1e3:7.2f} ms  fps {r.throughput_fps:7.2f}  stalls {r.stall_count}")
    speedup = out["sequential"].report.steady_state_period_s / out["pipelined"].report.steady_state_period_s
    theory = (a.denoise + a.decode) / max(a.denoise, a.decode)
    same = np.array_equal(out["sequential"].pixel_array(), out["pipelined"].pixel_array())
    print(f"speedup {speedup:.3f} (theory {theory:.3f}), identical pixels: {same}")


if __name__ == "__main__":
    main()

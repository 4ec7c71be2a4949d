"""Compare full-resolution training with coarse-to-fine training.

Both runs take the same number of iterations; the coarse-to-fine run spends
the first half of its epochs at half resolution.

    python scripts/acceleration.py --size 128 --epochs 20
"""
import argparse
import time

from dvp.metrics import f_data
from dvp.network import NetSpec
from dvp.synthetic import flicker_video
from dvp.trainer import TrainConfig, infer_video, train_dvp


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=3)
    args = p.parse_args()
    pv = flicker_video(args.frames, args.size, seed=args.seed)
    times = {}
    for c2f in (False, True):
        t0 = time.time()
        state = train_dvp(pv, NetSpec(), TrainConfig(epochs=args.epochs, coarse_to_fine=c2f))
        times[c2f] = time.time() - t0
        fd = f_data(pv.processed, infer_video(state, pv.inputs)[0])
        label = "coarse-to-fine" if c2f else "full resolution"
        print(f"{label:16s} {state.iteration} iterations  {times[c2f]:.1f} s  F_data {fd:.2f} dB")
    print(f"wall-time ratio {times[True] / times[False]:.2f}")


if __name__ == "__main__":
    main()

"""Train (or load) the cached toy models for a list of seeds."""
import argparse
import logging
import time

from compresslab.harness.models import ModelStore


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--cache", default=None, help="model cache directory")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    store = ModelStore(args.cache)
    for s in (int(x) for x in args.seeds.split(",")):
        t0 = time.perf_counter()
        w = store.get(s)
        print(f"seed {s} digest {w.digest()} {store.path(s)} {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()

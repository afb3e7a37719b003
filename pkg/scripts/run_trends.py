"""Run the desk-scale trend suites on cached models and write reports."""
import argparse
import logging
import time
from pathlib import Path

from compresslab.caa import AttackConfig
from compresslab.harness.models import ModelStore
from compresslab.harness.report import emit_report
from compresslab.harness.suites import KINDS, ExperimentSpec, SuiteRunner, run_suite
from compresslab.tcaa import TransferConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--n-samples", type=int, default=200)
    ap.add_argument("--attack-iters", type=int, default=50)
    ap.add_argument("--transfer-iters", type=int, default=50)
    ap.add_argument("--kinds", default=",".join(KINDS))
    ap.add_argument("--cache", default=None)
    ap.add_argument("--out", default="out/trends")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    seeds = tuple(int(x) for x in args.seeds.split(","))
    pairs = tuple((a, b) for a, b in zip(seeds, seeds[1:] + seeds[:1]) if a != b)
    spec = ExperimentSpec("retention_sweep", model_seeds=seeds, n_samples=args.n_samples,
                          transfer_pairs=pairs, transfer_configs=(((2, 0.2),),),
                          attack=AttackConfig(iterations=args.attack_iters),
                          transfer=TransferConfig(layers=(1, 2, 3), iterations=args.transfer_iters))
    runner = SuiteRunner(spec, ModelStore(args.cache))
    out = Path(args.out)
    for kind in args.kinds.split(","):
        t0 = time.perf_counter()
        bundle = run_suite(kind, spec, runner=runner)
        emit_report(bundle, out / kind)
        checks = " ".join(f"{k}={v}" for k, v in sorted(bundle.checks.items()))
        print(f"{kind} {time.perf_counter() - t0:.0f}s {checks}")


if __name__ == "__main__":
    main()

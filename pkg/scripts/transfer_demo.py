"""Pretrain on 5 shapes, then compare fine-tuning against scratch on 11 shapes
and check that feature extraction leaves the backbone untouched."""
import argparse
import json
from pathlib import Path

from attnconv.experiments import frozen_drift, pretrain_task_a, transfer_study


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("workdir")
    p.add_argument("--budget", type=int, default=8, help="max epochs per run")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a = p.parse_args()
    work = Path(a.workdir)
    ckpt = pretrain_task_a(work)
    study = transfer_study(work, seeds=a.seeds, budget=a.budget, threshold=a.threshold, checkpoint=ckpt)
    drift = frozen_drift(ckpt, work / "task_b")
    report = {"transfer": study.to_json(), "frozen_drift": drift}
    (work / "transfer.json").write_text(json.dumps(report, indent=2, default=str))
    print(json.dumps(report, indent=2, default=str))


if __name__ == "__main__":
    main()

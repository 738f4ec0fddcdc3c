"""Generate shapes data, then run the k-run training protocol on it via the CLI."""
import argparse
import json
import sys
from pathlib import Path

from attnconv import cli
from attnconv.experiments import make_desk_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("workdir")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    work = Path(a.workdir)
    root = make_desk_dataset(work / "shapes", seed=a.seed)
    code = cli.main(["train", "--root", str(root), "--out", str(work / "runs"), "--seed", str(a.seed),
                     "--runs", str(a.runs), "--epochs", str(a.epochs)])
    summary = work / "runs" / "protocol.json"
    if summary.exists():
        print(json.dumps(json.loads(summary.read_text()), indent=2))
    sys.exit(code)


if __name__ == "__main__":
    main()

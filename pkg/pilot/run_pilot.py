"""Criterion-8 pilot: the full toy pipeline with default settings, timed on one core."""
import argparse
import json
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

import torch

from dalm.pipeline import ToyRunConfig, run_toy_pipeline, write_run_summary


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).parent / "results"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ToyRunConfig(seed=args.seed)
    start = time.time()

    def progress(rec):
        if rec.step % 500 == 0:
            print(f"{time.time() - start:7.0f}s step={rec.step} loss={rec.loss:.3f}", flush=True)

    with tempfile.TemporaryDirectory() as work:
        result = run_toy_pipeline(cfg, work, on_step=progress)
    write_run_summary(result, out / "summary.json")
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2))
    (out / "report.tsv").write_text(result.report.table() + "\n")
    print(result.report.table())
    print(json.dumps({"timings": result.timings, "diagnostics": result.diagnostics}, indent=2))


if __name__ == "__main__":
    main()

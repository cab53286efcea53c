"""Freeze the test fixtures from a finished `etta pretrain` run.

    python scripts/make_fixtures.py work/data work/model tests/fixtures

Copies the checkpoint and training log, then pins the source images, their
r=4 feature statistics and golden logits for a few clean test images.
"""

import json
import shutil
import sys
from pathlib import Path

import numpy as np

from etta.adapt import compute_source_stats
from etta.data import ingest_raw
from etta.tokenagg import MergeConfig
from etta.vit import load_checkpoint, model_forward


def main(data_dir: Path, model_dir: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(model_dir / "vit.etta", out / "vit_source.etta")
    shutil.copyfile(model_dir / "train_log.jsonl", out / "train_log.jsonl")
    params = load_checkpoint(out / "vit_source.etta")

    source, _ = ingest_raw(data_dir / "source.etta")
    np.save(out / "source_images.npy", source)
    compute_source_stats(params, source, MergeConfig(4)).save(out / "source_stats_r4.etta")

    test, _ = ingest_raw(data_dir / "test.etta")
    golden = test[:4]
    np.save(out / "golden_images.npy", golden)
    logits = {str(r): model_forward(golden, params, merge=MergeConfig(r)).logits.tolist() for r in (0, 4)}
    (out / "golden_logits.json").write_text(json.dumps(logits, indent=1) + "\n")
    print(f"fixtures written to {out}")


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    main(*map(Path, sys.argv[1:]))

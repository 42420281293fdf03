"""Materialize MovieLens-100K as ``u.data`` / ``u.user`` without grouplens.org access.

The RecBole wheel on PyPI ships an atomic-file copy of ML-100K. This script
downloads that wheel with pip, extracts the interaction and user files and
rewrites them in the native tab/pipe separated ML-100K layout.

    python scripts/fetch_ml100k.py data/ml-100k
"""

import argparse
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

WHEEL = "recbole==1.2.1"
PREFIX = "recbole/dataset_example/ml-100k/"


def _download_wheel(tmp: Path) -> Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", str(tmp), WHEEL],
        check=True,
    )
    (wheel,) = tmp.glob("recbole-*.whl")
    return wheel


def _rows(raw: bytes):
    lines = io.TextIOWrapper(io.BytesIO(raw), encoding="latin-1").read().splitlines()
    for line in lines[1:]:  # atomic-file header
        if line.strip():
            yield line.split("\t")


def convert(wheel: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as zf:
        inter = zf.read(PREFIX + "ml-100k.inter")
        users = zf.read(PREFIX + "ml-100k.user")
    with open(out / "u.data", "w") as fh:
        for u, i, r, t in _rows(inter):
            fh.write(f"{u}\t{i}\t{int(float(r))}\t{int(float(t))}\n")
    with open(out / "u.user", "w") as fh:
        for u, age, gender, occ, zipc in _rows(users):
            fh.write(f"{u}|{age}|{gender}|{occ}|{zipc}\n")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path, nargs="?", default=Path("data/ml-100k"))
    args = ap.parse_args(argv)
    if (args.out / "u.data").exists() and (args.out / "u.user").exists():
        print(f"already present: {args.out}")
        return 0
    with tempfile.TemporaryDirectory() as tmp:
        convert(_download_wheel(Path(tmp)), args.out)
    print(f"wrote {args.out}/u.data and {args.out}/u.user")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from attrunlearn.dataset import InteractionSet, prepare

ROOT = Path(__file__).resolve().parents[1]


def write_toy_ml100k(directory: Path, n_users: int = 60, n_items: int = 80, per_user: int = 15, seed: int = 0):
    """Synthetic ML-100K-layout files with gender/age tied weakly to taste."""
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    users = []
    for u in range(1, n_users + 1):
        gender = "M" if u % 3 else "F"
        age = int(rng.integers(18, 70))
        users.append(f"{u}|{age}|{gender}|other|00000")
        pool = np.arange(1, n_items + 1)
        weights = np.where((pool % 2 == 0) == (gender == "F"), 2.0, 1.0)
        items = rng.choice(pool, per_user, replace=False, p=weights / weights.sum())
        for j, i in enumerate(items):
            lines.append(f"{u}\t{i}\t{int(rng.integers(1, 6))}\t{880000000 + 1000 * u + j}")
    (directory / "u.data").write_text("\n".join(lines) + "\n")
    (directory / "u.user").write_text("\n".join(users) + "\n")
    return directory / "u.data", directory / "u.user"


@pytest.fixture
def toy_files(tmp_path):
    return write_toy_ml100k(tmp_path / "raw")


@pytest.fixture
def toy_prepared(toy_files):
    return prepare(*toy_files)


def make_interactions(pairs, n_users=None, n_items=None, timestamps=None):
    pairs = np.asarray(pairs, dtype=np.int64)
    nu = int(pairs[:, 0].max() + 1) if n_users is None else n_users
    ni = int(pairs[:, 1].max() + 1) if n_items is None else n_items
    ts = np.arange(len(pairs)) if timestamps is None else np.asarray(timestamps)
    return InteractionSet(
        users=pairs[:, 0], items=pairs[:, 1], ratings=np.ones(len(pairs)), timestamps=ts,
        n_users=nu, n_items=ni,
        user_ids=np.array([str(u) for u in range(nu)], dtype=object),
        item_ids=np.array([str(i) for i in range(ni)], dtype=object),
    )


def ml100k_dir() -> Path:
    """Locate ML-100K, downloading it with the bundled fetch script if needed."""
    env = os.environ.get("ML100K_DIR")
    if env:
        return Path(env)
    local = ROOT / "data" / "ml-100k"
    if not (local / "u.data").exists():
        subprocess.run([sys.executable, str(ROOT / "scripts" / "fetch_ml100k.py"), str(local)], check=True)
    return local

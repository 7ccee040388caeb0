#!/usr/bin/env python3
"""Convert a Planetoid citation dataset (Cora, Citeseer, Pubmed) into the
four-file layout read by `gsan`.

The raw files are the `ind.<name>.*` pickles from the Planetoid repository.
The standard public split is kept: the labelled nodes in `ind.<name>.y`
(20 per class) for training, the next 500 nodes for validation and the
listed 1000 test nodes.

    python convert_planetoid.py --raw RAW_DIR --name cora --out data/cora
    python convert_planetoid.py --download --raw RAW_DIR --name citeseer --out data/citeseer

Self-loops and duplicate edges are dropped. Citeseer has test indices with
no feature row; those nodes get all-zero features and label 0, matching the
common preprocessing.
"""

import argparse
import json
import pickle
import sys
import urllib.request
from pathlib import Path

import numpy as np
import scipy.sparse as sp

PARTS = ("x", "y", "tx", "ty", "allx", "ally", "graph")
URL = "https://github.com/kimiyoung/planetoid/raw/master/data/ind.{name}.{part}"


def download(raw: Path, name: str) -> None:
    raw.mkdir(parents=True, exist_ok=True)
    for part in PARTS + ("test.index",):
        target = raw / f"ind.{name}.{part}"
        if not target.exists():
            urllib.request.urlretrieve(URL.format(name=name, part=part), target)


def _load_pickle(path: Path):
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def read_planetoid(raw: Path, name: str):
    """Return (features, labels, edges, train, valid, test) as numpy data."""
    obj = {p: _load_pickle(raw / f"ind.{name}.{p}") for p in PARTS}
    test_index = [int(line) for line in (raw / f"ind.{name}.test.index").read_text().split()]
    test_sorted = np.sort(test_index)

    tx, ty = obj["tx"], obj["ty"]
    lo, hi = int(test_sorted[0]), int(test_sorted[-1])
    if hi - lo + 1 != len(test_sorted):
        full = hi - lo + 1
        tx_ext = sp.lil_matrix((full, tx.shape[1]))
        tx_ext[test_sorted - lo, :] = tx
        ty_ext = np.zeros((full, ty.shape[1]))
        ty_ext[test_sorted - lo, :] = ty
        tx, ty = tx_ext, ty_ext

    features = sp.vstack((obj["allx"], tx)).tolil()
    features[test_index, :] = features[test_sorted, :]
    onehot = np.vstack((obj["ally"], ty))
    onehot[test_index, :] = onehot[test_sorted, :]
    labels = onehot.argmax(axis=1)

    n = features.shape[0]
    edges = set()
    for src, nbrs in obj["graph"].items():
        for dst in nbrs:
            if src != dst and src < n and dst < n:
                edges.add((min(src, dst), max(src, dst)))

    n_train = obj["y"].shape[0]
    train = list(range(n_train))
    valid = list(range(n_train, min(n_train + 500, obj["allx"].shape[0])))
    test = sorted(int(i) for i in test_sorted)
    return features.tocsr(), labels, sorted(edges), train, valid, test


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_dataset(out: Path, features, labels, edges, train, valid, test) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "edges.tsv", "w", newline="\n") as fh:
        for i, j in edges:
            fh.write(f"{i}\t{j}\n")
    dense = features.toarray() if sp.issparse(features) else np.asarray(features)
    with open(out / "features.csv", "w", newline="\n") as fh:
        for row in dense:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    with open(out / "labels.txt", "w", newline="\n") as fh:
        fh.write("".join(f"{int(c)}\n" for c in labels))
    splits = {"train": train, "valid": valid, "test": test}
    (out / "splits.json").write_text(json.dumps(splits) + "\n")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--raw", type=Path, required=True, help="directory with ind.<name>.* files")
    ap.add_argument("--name", required=True, help="cora, citeseer or pubmed")
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--download", action="store_true", help="fetch missing raw files first")
    args = ap.parse_args(argv)
    if args.download:
        download(args.raw, args.name)
    features, labels, edges, train, valid, test = read_planetoid(args.raw, args.name)
    write_dataset(args.out, features, labels, edges, train, valid, test)
    print(
        f"{args.name}: {features.shape[0]} nodes, {len(edges)} undirected edges, "
        f"{features.shape[1]} features, {labels.max() + 1} classes -> {args.out}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())

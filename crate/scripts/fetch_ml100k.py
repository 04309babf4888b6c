#!/usr/bin/env python3
"""Fetch MovieLens-100K and write it as `user::item::rating::timestamp` rows.

The RecBole wheel on PyPI bundles the ML-100K interaction file, which makes it
reachable through an ordinary package index. Output: data/ml-100k/ratings.dat
"""
import glob
import os
import subprocess
import sys
import tempfile
import zipfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUT = os.path.join(ROOT, "data", "ml-100k", "ratings.dat")
MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def main():
    if os.path.exists(OUT):
        print(f"{OUT} already present")
        return
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "-d", tmp, "recbole==1.2.1"])
        wheel = glob.glob(os.path.join(tmp, "recbole-*.whl"))[0]
        lines = zipfile.ZipFile(wheel).read(MEMBER).decode().splitlines()
    os.makedirs(os.path.dirname(OUT), exist_ok=True)
    with open(OUT, "w") as f:
        for line in lines[1:]:
            user, item, rating, ts = line.split("\t")
            f.write(f"{user}::{item}::{int(float(rating))}::{int(float(ts))}\n")
    print(f"wrote {len(lines) - 1} ratings to {OUT}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Download and verify the CIFAR binary distributions.

Usage:
    python scripts/fetch_cifar.py --root data [--dataset cifar10|cifar100]

Downloads the official .tar.gz, checks its md5 against the published
checksum, and extracts it under --root, yielding
    <root>/cifar-10-batches-bin/*.bin   (cifar10)
    <root>/cifar-100-binary/*.bin       (cifar100)
"""

import argparse
import hashlib
import os
import sys
import tarfile
import urllib.request

ARCHIVES = {
    "cifar10": (
        "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
        "c32a1d4ab5d03f1284b67883e8d87530",
    ),
    "cifar100": (
        "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
        "03b5dce01913d631647c71ecec9e9cb8",
    ),
}


def md5_of(path: str) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch(dataset: str, root: str) -> int:
    url, want = ARCHIVES[dataset]
    os.makedirs(root, exist_ok=True)
    archive = os.path.join(root, os.path.basename(url))
    if not (os.path.exists(archive) and md5_of(archive) == want):
        print(f"downloading {url}")
        urllib.request.urlretrieve(url, archive)
    got = md5_of(archive)
    if got != want:
        print(f"checksum mismatch for {archive}: got {got}, want {want}", file=sys.stderr)
        return 1
    print(f"checksum ok ({got}); extracting into {root}")
    with tarfile.open(archive, "r:gz") as tar:
        tar.extractall(root)
    return 0


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="data")
    ap.add_argument("--dataset", choices=sorted(ARCHIVES), default="cifar10")
    args = ap.parse_args()
    return fetch(args.dataset, args.root)


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Convert the JSON image dumps shipped in the `fashion-mnist` and `mnist`
npm packages into gzipped IDX files plus a dataset manifest.

usage: npm_to_idx.py <fashion-mnist pkg dir> <mnist pkg dir> <out dir>
"""
import gzip
import hashlib
import json
import os
import struct
import sys

FASHION_TRAIN_PER_CLASS = 1000
FASHION_TEST_PER_CLASS = 200
MNIST_TEST_PER_CLASS = 200


def write_idx(path, images, labels):
    n = len(images)
    img = struct.pack(">IIII", 0x00000803, n, 28, 28) + bytes(
        v for im in images for v in im
    )
    lab = struct.pack(">II", 0x00000801, n) + bytes(labels)
    out = []
    for suffix, payload in (("images-idx3-ubyte.gz", img), ("labels-idx1-ubyte.gz", lab)):
        p = f"{path}-{suffix}"
        with gzip.GzipFile(p, "wb", mtime=0) as f:
            f.write(payload)
        out.append(p)
    return out


def main():
    fm_dir, mn_dir, out_dir = sys.argv[1:4]
    os.makedirs(out_dir, exist_ok=True)
    fm_train, fm_train_lab, fm_test, fm_test_lab = [], [], [], []
    mn_test, mn_test_lab = [], []
    for c in range(10):
        rows = json.load(open(os.path.join(fm_dir, "src", "clothes", f"{c}.json")))["data"]
        # class 0 carries a couple of empty rows
        rows = [r for r in rows if len(r) == 784]
        # the tail of each class is used as the test pool
        fm_train += rows[:FASHION_TRAIN_PER_CLASS]
        fm_train_lab += [c] * FASHION_TRAIN_PER_CLASS
        fm_test += rows[-FASHION_TEST_PER_CLASS:]
        fm_test_lab += [c] * FASHION_TEST_PER_CLASS
        flat = json.load(open(os.path.join(mn_dir, "src", "digits", f"{c}.json")))["data"]
        for i in range(MNIST_TEST_PER_CLASS):
            px = flat[i * 784:(i + 1) * 784]
            mn_test.append([min(255, max(0, round(v * 255))) for v in px])
        mn_test_lab += [c] * MNIST_TEST_PER_CLASS
    sets = {
        "fashion-train": (fm_train, fm_train_lab),
        "fashion-test": (fm_test, fm_test_lab),
        "mnist-test": (mn_test, mn_test_lab),
    }
    manifest = []
    for name, (ims, labs) in sets.items():
        for p in write_idx(os.path.join(out_dir, name), ims, labs):
            digest = hashlib.sha256(open(p, "rb").read()).hexdigest()
            kind = "images" if "images" in p else "labels"
            manifest.append({
                "name": f"{name}-{kind}",
                "url": "file://" + os.path.basename(p),
                "sha256": digest,
                "kind": kind,
            })
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()

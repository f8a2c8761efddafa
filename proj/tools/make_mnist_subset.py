#!/usr/bin/env python3
"""Build the desk-scale MNIST subset used by the acceptance suite.

The original MNIST archives are not reachable from every build host, so the
IDX files are taken from the npm package ``mnist-data`` (1.2.6), which ships
them verbatim. The subset is the first 10000 training images and the first
1000 test images, packed into data/mnist-subset.tar.gz; CMake unpacks the
archive into the build tree.
"""
import argparse
import glob
import io
import os
import struct
import subprocess
import tarfile
import tempfile


def head(blob, count, header_len, item_size):
    fields = list(struct.unpack(">" + "I" * (header_len // 4), blob[:header_len]))
    fields[1] = count
    return struct.pack(">" + "I" * len(fields), *fields) + blob[header_len:header_len + count * item_size]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "data", "mnist-subset.tar.gz"))
    ap.add_argument("--train", type=int, default=10000)
    ap.add_argument("--test", type=int, default=1000)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist-data@1.2.6"], cwd=tmp, check=True, capture_output=True)
        with tarfile.open(glob.glob(os.path.join(tmp, "mnist-data-*.tgz"))[0]) as tf:
            tf.extractall(tmp)
        src = os.path.join(tmp, "package", "data")

        def read(name):
            with open(os.path.join(src, name), "rb") as f:
                return f.read()

        files = {
            "train-images-idx3-ubyte": head(read("train-images-idx3-ubyte"), args.train, 16, 784),
            "train-labels-idx1-ubyte": head(read("train-labels-idx1-ubyte"), args.train, 8, 1),
            "t10k-images-idx3-ubyte": head(read("t10k-images-idx3-ubyte"), args.test, 16, 784),
            "t10k-labels-idx1-ubyte": head(read("t10k-labels-idx1-ubyte"), args.test, 8, 1),
        }

    with tarfile.open(args.out, "w:gz") as tf:
        for name, blob in files.items():
            info = tarfile.TarInfo(f"mnist-subset/{name}")
            info.size = len(blob)
            info.mtime = 0
            tf.addfile(info, io.BytesIO(blob))
    print(f"wrote {args.out}: {args.train} train, {args.test} test")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
# Copyright 2026 The advtransfer Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Rebuild the CIFAR-10 binary layout from the `tfjs-cifar10` npm package.

The npm package stores each split as a PNG whose rows are images (1024 RGB
pixels, row-major) plus JSON label lists. This writes data_batch_{1..5}.bin
and test_batch.bin (1 label byte + 3072 planar RGB bytes per record).

    npm pack tfjs-cifar10 && tar xzf tfjs-cifar10-*.tgz
    python3 tools/cifar10_from_npm.py package/ /path/to/cifar-10-batches-bin
"""
import json
import pathlib
import sys

import numpy as np
from PIL import Image


def convert(png, labels, out):
    rows = np.asarray(Image.open(png).convert("RGB"), dtype=np.uint8)
    n = rows.shape[0]
    assert rows.shape == (n, 1024, 3) and len(labels) == n, png
    planar = rows.transpose(0, 2, 1).reshape(n, 3072)
    records = np.concatenate(
        [np.asarray(labels, dtype=np.uint8).reshape(n, 1), planar], axis=1)
    out.write_bytes(records.tobytes())


def main():
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    src, dst = pathlib.Path(sys.argv[1]), pathlib.Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    train = json.loads((src / "train_lables.json").read_text())
    for b in range(5):
        convert(src / f"data_batch_{b + 1}.png", train[b * 10000:(b + 1) * 10000],
                dst / f"data_batch_{b + 1}.bin")
    test = json.loads((src / "test_lables.json").read_text())
    convert(src / "test_batch.png", test, dst / "test_batch.bin")
    names = ["airplane", "automobile", "bird", "cat", "deer",
             "dog", "frog", "horse", "ship", "truck"]
    (dst / "batches.meta.txt").write_text("\n".join(names) + "\n")


if __name__ == "__main__":
    main()

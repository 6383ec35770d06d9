"""Regenerates the MAT-file fixtures used by test_importer.cpp (needs scipy, numpy, Pillow)."""
import pathlib

import numpy as np
import scipy.io
from PIL import Image

ROOT = pathlib.Path(__file__).resolve().parent / "mat"


def image(path, w, h, seed):
    rng = np.random.default_rng(seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((rng.random((h, w, 3)) * 255).astype(np.uint8)).save(path)


def main():
    # UCF_CC_50 layout: <n>.<ext> next to <n>_ann.mat with annPoints (N x 2, 1-based).
    ucf = ROOT / "ucf_cc_50"
    image(ucf / "1.png", 40, 30, 1)
    image(ucf / "2.png", 40, 30, 2)
    image(ucf / "10.png", 40, 30, 3)
    image(ucf / "3.png", 40, 30, 4)  # no annotation file
    scipy.io.savemat(ucf / "1_ann.mat", {"annPoints": np.array([[1.0, 1.0], [40.0, 30.0], [20.5, 10.25]])})
    scipy.io.savemat(ucf / "2_ann.mat", {"annPoints": np.array([[5.0, 6.0]])}, do_compression=True)
    # The second point converts to x = 40.5, outside a 40-wide image.
    scipy.io.savemat(ucf / "10_ann.mat", {"annPoints": np.array([[2.0, 3.0], [41.0, 3.0]])})

    # ShanghaiTech layout: images/IMG_<n> and ground-truth/GT_IMG_<n>.mat with image_info{1}.location.
    sh = ROOT / "shanghaitech"
    image(sh / "images" / "IMG_1.png", 32, 24, 5)
    (sh / "ground-truth").mkdir(parents=True, exist_ok=True)
    info = np.empty((1, 1), dtype=object)
    info[0, 0] = {"location": np.array([[3.0, 4.0], [10.0, 12.0]]), "number": np.array([[2.0]])}
    scipy.io.savemat(sh / "ground-truth" / "GT_IMG_1.mat", {"image_info": info}, do_compression=True)

    # UCF-QNRF layout: img_<nnnn> next to img_<nnnn>_ann.mat, single precision.
    qnrf = ROOT / "ucf_qnrf"
    image(qnrf / "img_0001.png", 36, 28, 6)
    scipy.io.savemat(qnrf / "img_0001_ann.mat",
                     {"annPoints": np.array([[7.5, 8.5], [30.0, 20.0], [1.0, 28.0]], dtype=np.float32)})

    # Mixed classes for the reader itself.
    cell = np.empty((1, 2), dtype=object)
    cell[0, 0] = np.array([[1, 2, 3]], dtype=np.int8)
    cell[0, 1] = "hi"
    scipy.io.savemat(ROOT / "types.mat", {
        "u16": np.array([[1, 2], [3, 65535]], dtype=np.uint16),
        "i32": np.array([[-7]], dtype=np.int32),
        "name": "crowd",
        "cell": cell,
        "s": {"a": np.array([[1.5]]), "b": np.array([[2.0, 4.0]])},
        "empty": np.zeros((0, 2)),
    }, do_compression=True)


if __name__ == "__main__":
    main()

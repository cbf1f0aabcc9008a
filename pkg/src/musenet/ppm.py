"""Binary P6 PPM read/write: bit-exact, codec-free image storage."""

import numpy as np

from .errors import DataIOError


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataIOError(f"PPM writer needs uint8 HxWx3 data, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(image).tobytes())
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_ppm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    fields, pos = [], 0
    while len(fields) < 4:  # magic, width, height, maxval
        end = blob.find(b"\n", pos)
        if end < 0:
            raise DataIOError(f"{path}: truncated PPM header")
        fields.extend(blob[pos:end].split())
        pos = end + 1
    if fields[0] != b"P6" or fields[3] != b"255":
        raise DataIOError(f"{path}: unsupported PPM variant")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    if data.size != w * h * 3:
        raise DataIOError(f"{path}: truncated PPM payload")
    return data.reshape(h, w, 3).copy()

"""PNG reading and writing for channel-first float images in [0, 1]."""
from pathlib import Path

import cv2
import numpy as np

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


def _to_hwc_bgr(image):
    return np.ascontiguousarray(np.asarray(image).transpose(1, 2, 0)[:, :, ::-1])


def write_png16(image, path):
    """Store a [3,H,W] float image as 16-bit PNG, value = round(pixel * 65535)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    raw = np.round(img * 65535).astype(np.uint16)
    _write(_to_hwc_bgr(raw), path)


def write_png8(image_u8, path):
    """Store a [3,H,W] uint8 array as-is."""
    arr = np.asarray(image_u8)
    if arr.dtype != np.uint8:
        raise TypeError(f"expected uint8 data, got {arr.dtype}")
    _write(_to_hwc_bgr(arr), path)


def _write(hwc, path):
    path = Path(path)
    ok = False
    try:
        ok = cv2.imwrite(str(path), hwc)
    except cv2.error:
        ok = False
    if not ok:
        raise OSError(f"could not write image to {path}")


def read_image(path):
    """Decode an image into a float32 [3,H,W] array in [0,1]; None if undecodable."""
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        return None
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    elif data.shape[2] == 4:
        data = data[:, :, :3]
    scale = {np.dtype(np.uint8): 255.0, np.dtype(np.uint16): 65535.0}.get(data.dtype)
    if scale is None:
        return None
    rgb = data[:, :, ::-1].transpose(2, 0, 1)
    return (rgb.astype(np.float64) / scale).astype(np.float32)


def read_u8(path):
    """Raw 8-bit [3,H,W] pixels, for checking exported byte values."""
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise OSError(f"cannot decode {path}")
    return np.ascontiguousarray(data[:, :, ::-1].transpose(2, 0, 1))

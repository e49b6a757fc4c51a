"""Compression stages: point-cloud codec, image adapter and tar packing."""

from .image import decode_image, encode_image, png_size
from .points import (
    EncodedCloud,
    PointCodecParams,
    decode_points,
    encode_points,
    kitti_bytes,
    read_kitti_bin,
)
from .tarpack import TarArchive, TarMember, tar_pack, tar_unpack_member

__all__ = [
    "EncodedCloud",
    "PointCodecParams",
    "TarArchive",
    "TarMember",
    "decode_image",
    "decode_points",
    "encode_image",
    "encode_points",
    "kitti_bytes",
    "png_size",
    "read_kitti_bin",
    "tar_pack",
    "tar_unpack_member",
]

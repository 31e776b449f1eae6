"""Light field codec: kernel-modulated network weights as the bitstream."""

from lfkm._core import (
    compute_bpp,
    decode,
    decode_view,
    encode,
    estimate_allocated_params,
    estimate_per_view_params,
    fb_bases,
    info,
    make_synthetic,
    num_threads,
    param_count,
    psnr,
    set_num_threads,
)

__all__ = [
    "compute_bpp",
    "decode",
    "decode_view",
    "encode",
    "estimate_allocated_params",
    "estimate_per_view_params",
    "fb_bases",
    "info",
    "make_synthetic",
    "num_threads",
    "param_count",
    "psnr",
    "set_num_threads",
]

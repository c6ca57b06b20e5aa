"""Reference-guided dynamic parameter selection.

Parameters of each ISP block are convex combinations of a small trainable
dictionary. The mixing weights come from global features of the input RGB
image, the reference RAW image, and block-specific intermediate images,
fused by a shared affine layer plus per-block projection heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import blocks
from .autodiff import Tensor, as_tensor
from .blocks import PipelineParams
from .model import ALL_HEADS, MAIN_ENCODER_CHANNELS, Model, SCALAR_BLOCKS


def encode(model: Model, which, image):
    """Run one encoder stack and global-average-pool to a 1-D feature.

    ``which`` is "input", "reference", or "block.<name>" for the
    per-block intermediate encoders.
    """
    prefix = f"enc.{which}"
    if f"{prefix}.l0.kernel" not in model.params:
        raise KeyError(f"unknown encoder {which!r}")
    n_layers = len(MAIN_ENCODER_CHANNELS) if which in ("input", "reference") else 4
    h = as_tensor(image)
    expected_cin = model.params[f"{prefix}.l0.kernel"].shape[2]
    if h.shape[2] != expected_cin:
        raise ad.ShapeError(f"encoder {which!r} expects {expected_cin} channels, got {h.shape[2]}")
    for i in range(n_layers):
        h = ad.conv2d(h, model.params[f"{prefix}.l{i}.kernel"], model.params[f"{prefix}.l{i}.bias"], stride=2)
        if i < n_layers - 1:
            h = ad.relu(h)
    return ad.global_avg_pool(h)


def fuse_features(model: Model, g_x, g_r):
    """Shared fusion of input and reference features (256 -> 128, ReLU)."""
    joint = ad.concat([g_x, g_r], axis=0)
    return ad.relu(ad.affine(joint, model.params["rwe.fuse.w"], model.params["rwe.fuse.b"]))


def head_weights(model: Model, head, g_fused, g_i):
    """Selection weights for one head: softmax(head(prj(g_fused) + g_i))."""
    if head not in ALL_HEADS:
        raise KeyError(f"unknown selection head {head!r}")
    v = ad.affine(g_fused, model.params[f"rwe.head.{head}.prj.w"], model.params[f"rwe.head.{head}.prj.b"])
    v = v + g_i
    logits = ad.affine(v, model.params[f"rwe.head.{head}.head.w"], model.params[f"rwe.head.{head}.head.b"])
    return ad.softmax(logits)


def estimate_weights(model: Model, g_x, g_r, g_i, head):
    """Full weight estimation from raw global features (fusion included)."""
    return head_weights(model, head, fuse_features(model, g_x, g_r), g_i)


def build_intermediate(model: Model, x_stage, block):
    """Block-specific intermediate image for weight estimation.

    For the invertible blocks this is the channel-concatenation of the
    stage input processed in the reverse direction by each dictionary
    candidate; tone mapping reuses the stage input unchanged to keep the
    cost bounded.
    """
    if block == "tm":
        return as_tensor(x_stage)
    k = model.config.dict_size
    outs = []
    for i in range(k):
        cand = ad.take(model.params[f"dict.{block}"], i)
        if block == "gain":
            outs.append(blocks.gg_apply(x_stage, cand, "rev"))
        elif block == "wb":
            outs.append(blocks.wb_apply(x_stage, cand, "rev"))
        elif block == "ccm":
            outs.append(blocks.cc_apply(x_stage, cand, "rev"))
        elif block == "gamma":
            outs.append(blocks.gc_apply(x_stage, cand, "rev"))
        else:
            raise KeyError(f"unknown block {block!r}")
    return ad.concat(outs, axis=2)


def select_parameter(candidates, weights, is_ccm=False):
    """Convex combination of dictionary candidates; CCMs are re-normalized."""
    mixed = ad.dict_mix(candidates, weights)
    if is_ccm:
        mixed = blocks.column_normalize(mixed)
    return mixed


@dataclass
class Selection:
    """Selected pipeline parameters plus the weights that produced them."""

    params: PipelineParams
    weights: dict  # head name -> softmax weight Tensor


def select_all(model: Model, x_rgb, y_ref) -> Selection:
    """Run the staged reverse pipeline on resized copies of (x, y_ref) and
    select every block parameter.

    The returned parameters are resolution independent: apply them to the
    full-resolution image afterwards. The forward pipeline must reuse the
    same weights, which is why they are returned alongside.
    """
    s = model.config.select_size
    xs = Tensor(ad.resize_bilinear(x_rgb, s, s))
    yr = Tensor(ad.resize_bilinear(y_ref, s, s))

    g_x = encode(model, "input", xs)
    g_r = encode(model, "reference", yr)
    g_fused = fuse_features(model, g_x, g_r)

    weights = {}
    stage = xs

    # tone mapping: one intermediate feature, one head per layer per direction
    g_tm = encode(model, "block.tm", build_intermediate(model, stage, "tm"))
    dtm_rev = dtm_fwd = None
    if model.config.use_dtm:
        rev_w, fwd_w = [], []
        for i in range(4):
            w = head_weights(model, f"tm.rev.l{i}", g_fused, g_tm)
            weights[f"tm.rev.l{i}"] = w
            rev_w.append(w)
        for i in range(4):
            w = head_weights(model, f"tm.fwd.l{i}", g_fused, g_tm)
            weights[f"tm.fwd.l{i}"] = w
            fwd_w.append(w)
        dtm_rev = model.tm_layer_params("rev", rev_w)
        dtm_fwd = model.tm_layer_params("fwd", fwd_w)
        stage = blocks.dtm_apply(stage, dtm_rev)

    selected = {}
    appliers = {
        "gamma": lambda x, p: blocks.gc_apply(x, p, "rev"),
        "ccm": lambda x, p: blocks.cc_apply(x, p, "rev"),
        "wb": lambda x, p: blocks.wb_apply(x, p, "rev"),
        "gain": lambda x, p: blocks.gg_apply(x, p, "rev"),
    }
    for block in ("gamma", "ccm", "wb", "gain"):
        g_i = encode(model, f"block.{block}", build_intermediate(model, stage, block))
        w = head_weights(model, block, g_fused, g_i)
        weights[block] = w
        param = select_parameter(model.params[f"dict.{block}"], w, is_ccm=(block == "ccm"))
        selected[block] = param
        stage = appliers[block](stage, param)

    params = PipelineParams(
        gain=selected["gain"],
        wb_gains=selected["wb"],
        ccm=selected["ccm"],
        gamma=selected["gamma"],
        dtm_rev=dtm_rev,
        dtm_fwd=dtm_fwd,
    )
    return Selection(params=params, weights=weights)

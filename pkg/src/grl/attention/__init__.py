"""Exact and anchored self-attention, stripe/window geometry, anchors."""

from .blocks import (
    AnchorSpec,
    AttentionRecorder,
    anchor_factors,
    anchored_stripe_attention,
    compute_anchors,
    stripe_attention_tokens,
    stripe_for_layer,
    window_attention,
    window_attention_tokens,
    window_for_layer,
)
from .geometry import Plan, StripeSpec, TokenGroup, WindowSpec, make_plan, merge, partition, shift_mask
from .kernels import (
    MEASURES,
    AllocationTracker,
    FlopCounter,
    anchored_attention,
    anchored_maps,
    attention_map,
    exact_attention,
    similarity_logits,
)

__all__ = [
    "MEASURES",
    "AllocationTracker",
    "AnchorSpec",
    "AttentionRecorder",
    "FlopCounter",
    "Plan",
    "StripeSpec",
    "TokenGroup",
    "WindowSpec",
    "anchor_factors",
    "anchored_attention",
    "anchored_maps",
    "anchored_stripe_attention",
    "attention_map",
    "compute_anchors",
    "exact_attention",
    "make_plan",
    "merge",
    "partition",
    "shift_mask",
    "similarity_logits",
    "stripe_attention_tokens",
    "stripe_for_layer",
    "window_attention",
    "window_attention_tokens",
    "window_for_layer",
]

"""Per-modality entity encoders and their fused joint embedding.

Structure uses a two-layer graph attention network over the merged edge
list with diagonal feature weights per head: layer one averages its
heads (width d_struct), layer two concatenates them (width
heads * d_struct). Relation/attribute/name/visual features go through
one affine map each (width d_modal). The joint embedding concatenates
the L2-normalized per-modality rows scaled by a softmax over learned
fusion logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mmkg_align import tensor as T
from mmkg_align.kgdata import FeatureBundle
from mmkg_align.tensor import Tensor

MODALITIES = ("structure", "relation", "attribute", "name", "visual")
AFFINE_MODALITIES = ("relation", "attribute", "name", "visual")


@dataclass
class GatHead:
    w_diag: Tensor
    attn: Tensor


@dataclass
class ModelParams:
    """All trainable state plus the shape metadata needed to rebuild it.

    uncert_contrastive has one entry per enabled modality plus a trailing slot
    reserved for the fused contrastive term; the combined loss keeps
    that term unweighted, so the slot stays at its initial value.
    """

    modalities: list[str]
    d_struct: int
    d_modal: int
    heads: int
    n_entities: int
    in_dims: dict[str, int]
    entity_embed: Tensor | None
    gat_layers: list[list[GatHead]]
    affine_w: dict[str, Tensor]
    affine_b: dict[str, Tensor]
    fusion_logits: Tensor
    uncert_contrastive: Tensor
    uncert_distill: Tensor

    def trainable(self) -> list[Tensor]:
        out = [t for _, t in self.named_tensors()]
        return out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        if self.entity_embed is not None:
            named.append(("entity_embed", self.entity_embed))
        for li, layer in enumerate(self.gat_layers):
            for hi, head in enumerate(layer):
                named.append((f"gat.{li}.{hi}.w_diag", head.w_diag))
                named.append((f"gat.{li}.{hi}.attn", head.attn))
        for m in self.modalities:
            if m in self.affine_w:
                named.append((f"affine.{m}.w", self.affine_w[m]))
                named.append((f"affine.{m}.b", self.affine_b[m]))
        named.append(("fusion_logits", self.fusion_logits))
        named.append(("uncert_contrastive", self.uncert_contrastive))
        named.append(("uncert_distill", self.uncert_distill))
        return named


@dataclass
class ModalEmbeddings:
    modal: dict[str, Tensor]
    joint: Tensor


def _glorot(rng: np.random.Generator, *shape) -> np.ndarray:
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[1] if len(shape) > 1 else 1
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(bundle: FeatureBundle, modalities, d_struct: int, d_modal: int,
                heads: int, rng: np.random.Generator) -> ModelParams:
    """Seeded parameter init: Glorot-uniform affines and attention
    vectors, unit diagonal weights, normal(0, 1/sqrt(d)) entity rows,
    zero fusion and uncertainty logits."""
    modalities = [m for m in MODALITIES if m in modalities]
    if not modalities:
        raise ValueError("init_params: at least one modality must be enabled")
    n = bundle.n_total
    in_dims = {
        "relation": bundle.u_rel.shape[1],
        "attribute": bundle.u_attr.shape[1],
        "name": bundle.u_name.shape[1],
        "visual": bundle.image_rows.shape[1],
    }

    entity_embed = None
    gat_layers: list[list[GatHead]] = []
    if "structure" in modalities:
        entity_embed = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_struct), size=(n, d_struct)),
                              requires_grad=True)
        for _ in range(2):
            layer = [
                GatHead(
                    w_diag=Tensor(np.ones(d_struct), requires_grad=True),
                    attn=Tensor(_glorot(rng, 2 * d_struct), requires_grad=True),
                )
                for _ in range(heads)
            ]
            gat_layers.append(layer)

    affine_w, affine_b = {}, {}
    for m in modalities:
        if m == "structure":
            continue
        affine_w[m] = Tensor(_glorot(rng, in_dims[m], d_modal), requires_grad=True)
        affine_b[m] = Tensor(np.zeros(d_modal), requires_grad=True)

    return ModelParams(
        modalities=modalities,
        d_struct=d_struct,
        d_modal=d_modal,
        heads=heads,
        n_entities=n,
        in_dims=in_dims,
        entity_embed=entity_embed,
        gat_layers=gat_layers,
        affine_w=affine_w,
        affine_b=affine_b,
        fusion_logits=Tensor(np.zeros(len(modalities)), requires_grad=True),
        uncert_contrastive=Tensor(np.zeros(len(modalities) + 1), requires_grad=True),
        uncert_distill=Tensor(np.zeros(len(modalities)), requires_grad=True),
    )


def gat_head(h: Tensor, dst: np.ndarray, src: np.ndarray, head: GatHead,
             slope: float = 0.2) -> Tensor:
    """One attention head over the edge list: out[i] = relu(sum over
    incoming edges of softmax-normalized attention times the raw source
    row). Attention logits use the diagonally reweighted rows."""
    n, d = h.shape
    hw = h * head.w_diag
    a_dst = T.reshape(T.gather_rows(head.attn, np.arange(d)), (d, 1))
    a_src = T.reshape(T.gather_rows(head.attn, np.arange(d, 2 * d)), (d, 1))
    score_dst = T.reshape(T.matmul(hw, a_dst), (n,))
    score_src = T.reshape(T.matmul(hw, a_src), (n,))
    logits = T.leaky_relu(T.gather_rows(score_dst, dst) + T.gather_rows(score_src, src),
                          slope)
    shift = T.segment_max(logits, dst, n)
    z = T.exp(logits - Tensor(shift[dst]))
    denom = T.segment_sum(z, dst, n)
    alpha = z / T.gather_rows(denom, dst)
    out = T.segment_weighted_sum(T.gather_rows(h, src), alpha, dst, n)
    return T.relu(out)


def structure_encode(params: ModelParams, bundle: FeatureBundle) -> Tensor:
    """Two GAT layers: head mean, then head concatenation."""
    dst, src = bundle.edges_dst, bundle.edges_src
    first = [gat_head(params.entity_embed, dst, src, head) for head in params.gat_layers[0]]
    h = first[0]
    for other in first[1:]:
        h = h + other
    h = h * (1.0 / len(first))
    second = [gat_head(h, dst, src, head) for head in params.gat_layers[1]]
    return T.concat_cols(second)


def linear_encode(u: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(u, w) + b


def fuse_joint(modal: dict[str, Tensor], order, fusion_logits: Tensor) -> Tensor:
    """Concatenate L2-normalized modality rows scaled by softmaxed logits."""
    m = len(order)
    if fusion_logits.shape != (m,):
        raise ValueError(
            f"fuse_joint: expected {m} fusion logits, got shape {fusion_logits.shape}"
        )
    weights = T.reshape(T.row_softmax(T.reshape(fusion_logits, (1, m))), (m,))
    parts = []
    for k, name in enumerate(order):
        part = T.l2_normalize_rows(modal[name]) * T.gather_rows(weights, np.array([k]))
        parts.append(part)
    return T.concat_cols(parts)


def forward_all(params: ModelParams, bundle: FeatureBundle, dropout_rate: float = 0.0,
                rng: np.random.Generator | None = None) -> ModalEmbeddings:
    """Encode every enabled modality and fuse the joint embedding.

    Dropout (inverted, optional) applies to the per-modality embeddings
    before fusion and is skipped when rate is 0 or no rng is given.
    """
    modal: dict[str, Tensor] = {}
    for m in params.modalities:
        if m == "structure":
            modal[m] = structure_encode(params, bundle)
            continue
        u = {
            "relation": bundle.u_rel,
            "attribute": bundle.u_attr,
            "name": bundle.u_name,
            "visual": bundle.image_rows,
        }[m]
        modal[m] = linear_encode(Tensor(u), params.affine_w[m], params.affine_b[m])
    if dropout_rate > 0.0 and rng is not None:
        modal = {m: T.dropout(h, dropout_rate, rng) for m, h in modal.items()}
    joint = fuse_joint(modal, params.modalities, params.fusion_logits)
    return ModalEmbeddings(modal=modal, joint=joint)

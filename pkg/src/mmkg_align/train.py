"""Training loop for the alignment model.

Each step runs a full-graph forward pass, gathers the minibatch rows
(KG2 rows live at offset n1) and optimizes the combined loss. Optional
extras: dev-based early stopping with best-state restore, iterative
pseudo-seed expansion from mutual nearest neighbours, and a fully
unsupervised seeding mode that bootstraps from raw name or image
features. Training pairs must be one-to-one across the run.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from mmkg_align import evaluate, tensor as T
from mmkg_align.config import RunConfig
from mmkg_align.encoders import ModelParams, GatHead, MODALITIES, forward_all, init_params
from mmkg_align.evaluate import normalize_rows
from mmkg_align.kgdata import FeatureBundle
from mmkg_align.losses import BatchPairs, combined_loss
from mmkg_align.tensor import Tensor


class TrainingError(RuntimeError):
    pass


class BootstrapError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: ModelParams
    records: list[dict]
    best_epoch: int
    best_dev: dict | None
    admitted: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))


def make_batches(pairs: np.ndarray, batch_size: int,
                 rng: np.random.Generator) -> list[BatchPairs]:
    """Shuffle pairs into batches, deferring any pair that would repeat
    an id inside the current batch. A final fragment smaller than two
    pairs is folded into the previous batch."""
    pairs = np.asarray(pairs, dtype=np.int64)
    if len(pairs) < 2:
        raise ValueError("need at least two alignment pairs to form a batch")
    queue = deque(map(tuple, pairs[rng.permutation(len(pairs))]))
    raw: list[list[tuple[int, int]]] = []
    while queue:
        taken: list[tuple[int, int]] = []
        deferred: list[tuple[int, int]] = []
        seen_l: set[int] = set()
        seen_r: set[int] = set()
        while queue and len(taken) < batch_size:
            left, right = queue.popleft()
            if left in seen_l or right in seen_r:
                deferred.append((left, right))
            else:
                taken.append((left, right))
                seen_l.add(left)
                seen_r.add(right)
        queue.extendleft(reversed(deferred))
        raw.append(taken)
    if len(raw) > 1 and len(raw[-1]) < 2:
        raw[-2].extend(raw.pop())
    return [BatchPairs(np.array([p[0] for p in b]), np.array([p[1] for p in b]))
            for b in raw]


def encode_all(params: ModelParams, bundle: FeatureBundle):
    """Inference forward pass; returns per-modality and joint arrays."""
    out = forward_all(params, bundle)
    return {m: t.data for m, t in out.modal.items()}, out.joint.data


def mutual_nearest(a: np.ndarray, b: np.ndarray, chunk: int = 1024):
    """Mutual cosine nearest neighbours between two row sets.

    Returns (idx, sims): idx[:, 0] indexes a, idx[:, 1] indexes b.
    Argmax ties resolve to the lowest index.
    """
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    an, bn = normalize_rows(a), normalize_rows(b)

    def best(x, y):
        hits = np.empty(len(x), dtype=np.int64)
        sims = np.empty(len(x))
        for start in range(0, len(x), chunk):
            stop = min(start + chunk, len(x))
            scores = x[start:stop] @ y.T
            hits[start:stop] = scores.argmax(axis=1)
            sims[start:stop] = scores[np.arange(stop - start), hits[start:stop]]
        return hits, sims

    best_ab, sim_ab = best(an, bn)
    best_ba, _ = best(bn, an)
    i = np.arange(len(a))
    mutual = best_ba[best_ab] == i
    idx = np.stack([i[mutual], best_ab[mutual]], axis=1)
    return idx, sim_ab[mutual]


def unsupervised_seeds(bundle: FeatureBundle, mode: str,
                       max_seeds: int = 4000) -> np.ndarray:
    """Bootstrap alignment seeds from raw surface features alone.

    Mutual nearest neighbours on name features (mode "name") or on the
    rows that carry real images (mode "visual"), kept in descending
    similarity order and truncated to max_seeds.
    """
    n1 = bundle.n1
    if mode == "name":
        feats = bundle.u_name
        left_ids = np.arange(n1, dtype=np.int64)
        right_ids = np.arange(bundle.n2, dtype=np.int64)
    elif mode == "visual":
        feats = bundle.image_rows
        left_ids = np.flatnonzero(bundle.image_mask[:n1])
        right_ids = np.flatnonzero(bundle.image_mask[n1:])
    else:
        raise ValueError(f"unsupervised mode must be 'name' or 'visual', got {mode!r}")
    if len(left_ids) == 0 or len(right_ids) == 0:
        raise BootstrapError(f"no rows carry {mode} features on one side")
    idx, sims = mutual_nearest(feats[left_ids], feats[n1 + right_ids])
    if len(idx) == 0:
        raise BootstrapError("no mutual nearest neighbours between the sides")
    order = np.lexsort((left_ids[idx[:, 0]], -sims))[:max_seeds]
    return np.stack([left_ids[idx[order, 0]], right_ids[idx[order, 1]]], axis=1)


def _snapshot(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.named_tensors()}


def _restore(params: ModelParams, snap: dict[str, np.ndarray]) -> None:
    for name, t in params.named_tensors():
        t.data[...] = snap[name]


def train(bundle: FeatureBundle, cfg: RunConfig, train_pairs: np.ndarray,
          dev_pairs: np.ndarray | None = None,
          eval_candidates: tuple[np.ndarray, np.ndarray] | None = None,
          pseudo_pools: tuple[np.ndarray, np.ndarray] | None = None,
          log_fn=None) -> TrainResult:
    """Run the full optimization and return the best parameters found.

    dev_pairs drive periodic evaluation (rank within eval_candidates,
    MRR with hits@1 as tie-break), early stopping after `patience`
    evaluations without improvement, and restore of the best snapshot.
    pseudo_pools are the per-side candidate ids eligible for iterative
    seed expansion; admitted pairs join the training pool permanently.
    """
    rng = np.random.default_rng(cfg.seed)
    params = init_params(bundle, cfg.modalities, cfg.struct_dim, cfg.modal_dim,
                         cfg.heads, rng)
    opt = T.AdamW(params.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n1 = bundle.n1

    pool = np.asarray(train_pairs, dtype=np.int64).copy()
    use_dev = dev_pairs is not None and len(dev_pairs) > 0
    if use_dev:
        cand_l, cand_r = eval_candidates if eval_candidates is not None else (
            dev_pairs[:, 0], dev_pairs[:, 1])
        cand_l = np.unique(np.asarray(cand_l, dtype=np.int64))
        cand_r = np.unique(np.asarray(cand_r, dtype=np.int64))

    avail_l: set[int] = set()
    avail_r: set[int] = set()
    if pseudo_pools is not None:
        avail_l = set(int(v) for v in pseudo_pools[0])
        avail_r = set(int(v) for v in pseudo_pools[1])
    streak: dict[tuple[int, int], int] = {}
    admitted: list[tuple[int, int]] = []

    records: list[dict] = []
    best_snap = None
    best_key = None
    best_epoch = 0
    best_dev = None
    bad_evals = 0

    for epoch in range(1, cfg.epochs + 1):
        epoch_loss = 0.0
        batches = make_batches(pool, cfg.batch_size, rng)
        last = None
        for bp in batches:
            with T.GradTape():
                emb = forward_all(params, bundle, cfg.dropout, rng)
                left_rows = bp.left
                right_rows = bp.right + n1
                ml = {m: T.gather_rows(emb.modal[m], left_rows) for m in params.modalities}
                mr = {m: T.gather_rows(emb.modal[m], right_rows) for m in params.modalities}
                out = combined_loss(
                    ml, mr,
                    T.gather_rows(emb.joint, left_rows),
                    T.gather_rows(emb.joint, right_rows),
                    params.modalities, params.uncert_contrastive, params.uncert_distill,
                    cfg.tau_contrastive, cfg.tau_distill,
                    modal_contrastive=cfg.modal_contrastive,
                    distill=cfg.distill,
                    adaptive_weights=cfg.adaptive_weights,
                )
            value = out.total.item()
            if not math.isfinite(value):
                err = TrainingError(f"non-finite loss at epoch {epoch}: {value}")
                err.record = {"epoch": epoch, "loss": value}
                raise err
            T.backward(out.total)
            opt.step()
            T.zero_grads(params.trainable())
            epoch_loss += value
            last = out
        rec = {"epoch": epoch, "loss": epoch_loss / len(batches), "n_train": len(pool)}
        rec["alpha"] = {k: round(v, 6) for k, v in last.alpha.items()}
        rec["beta"] = {k: round(v, 6) for k, v in last.beta.items()}

        evaluated = use_dev and epoch % cfg.eval_every == 0
        if evaluated:
            _, joint = encode_all(params, bundle)
            mets = evaluate.hits_mrr(evaluate.alignment_ranks(
                joint, n1, dev_pairs, cand_l, cand_r, cfg.direction))
            rec["dev_mrr"] = mets["mrr"]
            rec["dev_hits1"] = mets["hits@1"]
            key = (mets["mrr"], mets["hits@1"])
            if best_key is None or key > best_key:
                best_key, best_epoch, best_dev = key, epoch, mets
                best_snap = _snapshot(params)
                bad_evals = 0
            else:
                bad_evals += 1

        it = cfg.iterative
        if (it.enabled and avail_l and avail_r and epoch >= it.start_epoch
                and (epoch - it.start_epoch) % it.every == 0):
            la = np.fromiter(sorted(avail_l), dtype=np.int64)
            ra = np.fromiter(sorted(avail_r), dtype=np.int64)
            _, joint = encode_all(params, bundle)
            idx, _ = mutual_nearest(joint[la], joint[ra + n1])
            proposals = sorted((int(la[i]), int(ra[j])) for i, j in idx)
            streak = {p: streak.get(p, 0) + 1 for p in proposals}
            newly = sorted(p for p, c in streak.items() if c >= it.confirm_rounds)
            if newly:
                for left, right in newly:
                    avail_l.discard(left)
                    avail_r.discard(right)
                streak = {p: c for p, c in streak.items()
                          if p[0] in avail_l and p[1] in avail_r}
                pool = np.concatenate([pool, np.asarray(newly, dtype=np.int64)])
                admitted.extend(newly)
                # fresh training pairs restart the optimization problem, so
                # a plateau measured before them no longer counts
                bad_evals = 0
            rec["proposals"] = len(proposals)
            rec["admitted"] = len(newly)

        stop = evaluated and bad_evals > cfg.patience
        if stop:
            rec["early_stop"] = True
        records.append(rec)
        if log_fn is not None:
            log_fn(rec)
        if stop:
            break

    if best_snap is not None:
        _restore(params, best_snap)
    else:
        best_epoch = len(records)
    return TrainResult(
        params=params,
        records=records,
        best_epoch=best_epoch,
        best_dev=best_dev,
        admitted=np.asarray(admitted, dtype=np.int64).reshape(-1, 2),
    )


# ---------- checkpoints ----------


def _params_from_meta(meta: dict) -> ModelParams:
    modalities = [m for m in MODALITIES if m in meta["modalities"]]
    d_struct, d_modal = int(meta["d_struct"]), int(meta["d_modal"])
    heads, n = int(meta["heads"]), int(meta["n_entities"])
    in_dims = {k: int(v) for k, v in meta["in_dims"].items()}
    entity = None
    gat_layers: list[list[GatHead]] = []
    if "structure" in modalities:
        entity = Tensor(np.zeros((n, d_struct)), requires_grad=True)
        gat_layers = [
            [GatHead(Tensor(np.zeros(d_struct), requires_grad=True),
                     Tensor(np.zeros(2 * d_struct), requires_grad=True))
             for _ in range(heads)]
            for _ in range(2)
        ]
    affine_w, affine_b = {}, {}
    for m in modalities:
        if m == "structure":
            continue
        affine_w[m] = Tensor(np.zeros((in_dims[m], d_modal)), requires_grad=True)
        affine_b[m] = Tensor(np.zeros(d_modal), requires_grad=True)
    k = len(modalities)
    return ModelParams(
        modalities=modalities, d_struct=d_struct, d_modal=d_modal, heads=heads,
        n_entities=n, in_dims=in_dims, entity_embed=entity, gat_layers=gat_layers,
        affine_w=affine_w, affine_b=affine_b,
        fusion_logits=Tensor(np.zeros(k), requires_grad=True),
        uncert_contrastive=Tensor(np.zeros(k + 1), requires_grad=True),
        uncert_distill=Tensor(np.zeros(k), requires_grad=True),
    )


def save_checkpoint(path: str, params: ModelParams, cfg_dict: dict,
                    extra: dict | None = None) -> None:
    """One JSON header line, then the raw float64 buffers in header order."""
    named = params.named_tensors()
    header = {
        "format": 1,
        "model": {
            "modalities": list(params.modalities),
            "d_struct": params.d_struct,
            "d_modal": params.d_modal,
            "heads": params.heads,
            "n_entities": params.n_entities,
            "in_dims": params.in_dims,
        },
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in named],
        "config": cfg_dict,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype=np.float64).tobytes())


def load_checkpoint(path: str):
    """Inverse of save_checkpoint: (params, config dict, extra dict)."""
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    try:
        header = json.loads(header_line.decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad checkpoint header: {exc}") from None
    if header.get("format") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    params = _params_from_meta(header["model"])
    named = dict(params.named_tensors())
    offset = 0
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in named or named[name].shape != shape:
            raise CheckpointError(f"{path}: unexpected tensor {name} {shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated tensor data")
        named[name].data[...] = np.frombuffer(
            blob, dtype=np.float64, count=count, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return params, header["config"], header["extra"]

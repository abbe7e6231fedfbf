"""Paired knowledge-graph datasets: loading, features, splits, synthesis.

On-disk layout (UTF-8, tab-separated, LF):

    ent_ids_1, ent_ids_2        entity id <TAB> name
    triples_1, triples_2        head <TAB> relation <TAB> tail
    attrs_1, attrs_2            entity id <TAB> attribute id
    ref_ent_ids                 aligned id in KG1 <TAB> id in KG2
    img_features_1/2 (optional) entity id <TAB> space-separated floats
    word_vectors.txt (optional) token <SPACE> space-separated floats

Entity ids are dense 0..n-1 per side. Features for the merged entity set
stack KG1 rows above KG2 rows; relation/attribute vocabularies of the
two sides occupy disjoint column blocks.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np


class DataError(Exception):
    """Base for dataset problems; the CLI maps these to exit code 3."""


class IngestError(DataError):
    pass


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


@dataclass
class Kg:
    names: list[str]
    triples: np.ndarray
    attr_pairs: np.ndarray
    n_relations: int
    n_attributes: int

    @property
    def n_entities(self) -> int:
        return len(self.names)


@dataclass
class KgPair:
    kg1: Kg
    kg2: Kg
    train_pairs: np.ndarray
    dev_pairs: np.ndarray
    test_pairs: np.ndarray


@dataclass
class FeatureBundle:
    """Raw input features for the merged entity set (KG1 rows first)."""

    n1: int
    n2: int
    u_rel: np.ndarray
    u_attr: np.ndarray
    u_name: np.ndarray
    image_rows: np.ndarray
    image_mask: np.ndarray
    edges_dst: np.ndarray
    edges_src: np.ndarray

    @property
    def n_total(self) -> int:
        return self.n1 + self.n2


# ---------- parsing ----------


def _read_lines(path: str) -> list[str]:
    if not os.path.exists(path):
        raise IngestError(f"missing required file: {path}")
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def _parse_int_rows(path: str, n_fields: int) -> np.ndarray:
    rows = []
    for ln, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != n_fields:
            raise ParseError(f"{path}:{ln}: expected {n_fields} tab-separated fields")
        try:
            rows.append([int(p) for p in parts])
        except ValueError:
            raise ParseError(f"{path}:{ln}: non-integer field") from None
    return np.asarray(rows, dtype=np.int64).reshape(-1, n_fields)


def _parse_entities(path: str) -> list[str]:
    pairs = []
    for ln, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        parts = line.split("\t", 1)
        if len(parts) != 2:
            raise ParseError(f"{path}:{ln}: expected 'id<TAB>name'")
        try:
            pairs.append((int(parts[0]), parts[1]))
        except ValueError:
            raise ParseError(f"{path}:{ln}: non-integer entity id") from None
    ids = sorted(i for i, _ in pairs)
    if ids != list(range(len(pairs))):
        raise ValidationError(f"{path}: entity ids must be dense 0..n-1 without repeats")
    names = [""] * len(pairs)
    for i, name in pairs:
        names[i] = name
    return names


def _load_kg(data_dir: str, side: str) -> Kg:
    names = _parse_entities(os.path.join(data_dir, f"ent_ids_{side}"))
    triples = _parse_int_rows(os.path.join(data_dir, f"triples_{side}"), 3)
    attrs = _parse_int_rows(os.path.join(data_dir, f"attrs_{side}"), 2)
    n = len(names)
    for col, label in ((0, "head"), (2, "tail")):
        if triples.size and (triples[:, col].min() < 0 or triples[:, col].max() >= n):
            raise ValidationError(f"triples_{side}: {label} entity id out of range")
    if triples.size and triples[:, 1].min() < 0:
        raise ValidationError(f"triples_{side}: negative relation id")
    if attrs.size and (attrs[:, 0].min() < 0 or attrs[:, 0].max() >= n):
        raise ValidationError(f"attrs_{side}: entity id out of range")
    if attrs.size and attrs[:, 1].min() < 0:
        raise ValidationError(f"attrs_{side}: negative attribute id")
    n_rel = int(triples[:, 1].max()) + 1 if triples.size else 0
    n_attr = int(attrs[:, 1].max()) + 1 if attrs.size else 0
    return Kg(names, triples, attrs, n_rel, n_attr)


def split_alignments(pairs: np.ndarray, train_ratio: float, dev_fraction: float,
                     rng_seed: int):
    """Shuffle reference pairs and split into train/dev/test.

    The train pool holds round(train_ratio * len(pairs)) pairs, of which
    ceil(dev_fraction * pool) are held out as dev (so dev is non-empty
    whenever a positive fraction is requested).
    """
    if not 0.0 < train_ratio <= 1.0:
        raise ValidationError(f"train_ratio must be in (0, 1], got {train_ratio}")
    if not 0.0 <= dev_fraction < 1.0:
        raise ValidationError(f"dev_fraction must be in [0, 1), got {dev_fraction}")
    perm = np.random.default_rng(rng_seed).permutation(len(pairs))
    shuffled = pairs[perm]
    n_pool = int(math.floor(train_ratio * len(pairs) + 0.5))
    n_dev = int(math.ceil(dev_fraction * n_pool))
    return shuffled[n_dev:n_pool], shuffled[:n_dev], shuffled[n_pool:]


def load_kg_pair(data_dir: str, train_ratio: float = 0.3, dev_fraction: float = 0.1,
                 rng_seed: int = 0) -> KgPair:
    """Load both graphs and split the reference alignment.

    Raises IngestError for missing files, ParseError for malformed lines
    (with the offending line number) and ValidationError for id-range or
    one-to-one violations.
    """
    kg1 = _load_kg(data_dir, "1")
    kg2 = _load_kg(data_dir, "2")
    refs = _parse_int_rows(os.path.join(data_dir, "ref_ent_ids"), 2)
    if refs.size == 0:
        raise ValidationError("ref_ent_ids: no alignment pairs")
    if refs[:, 0].min() < 0 or refs[:, 0].max() >= kg1.n_entities:
        raise ValidationError("ref_ent_ids: KG1 id out of range")
    if refs[:, 1].min() < 0 or refs[:, 1].max() >= kg2.n_entities:
        raise ValidationError("ref_ent_ids: KG2 id out of range")
    if len(np.unique(refs[:, 0])) != len(refs) or len(np.unique(refs[:, 1])) != len(refs):
        raise ValidationError("ref_ent_ids: alignment must be one-to-one")
    train, dev, test = split_alignments(refs, train_ratio, dev_fraction, rng_seed)
    return KgPair(kg1, kg2, train, dev, test)


# ---------- features ----------


def build_bow_features(kg: Kg):
    """Binary incidence matrices: (entities x relations, entities x attributes).

    An entity is incident to a relation when it appears as head or tail
    of a triple with that relation (direction ignored).
    """
    u_rel = np.zeros((kg.n_entities, kg.n_relations))
    if kg.triples.size:
        u_rel[kg.triples[:, 0], kg.triples[:, 1]] = 1.0
        u_rel[kg.triples[:, 2], kg.triples[:, 1]] = 1.0
    u_attr = np.zeros((kg.n_entities, kg.n_attributes))
    if kg.attr_pairs.size:
        u_attr[kg.attr_pairs[:, 0], kg.attr_pairs[:, 1]] = 1.0
    return u_rel, u_attr


def _fnv1a_32(data: bytes) -> int:
    h = 2166136261
    for byte in data:
        h ^= byte
        h = (h * 16777619) & 0xFFFFFFFF
    return h


def hashed_bigram_vector(name: str, dim: int) -> np.ndarray:
    """L2-normalized counts of character bigrams hashed into dim slots."""
    out = np.zeros(dim)
    s = name.lower()
    for i in range(len(s) - 1):
        out[_fnv1a_32(s[i:i + 2].encode("utf-8")) % dim] += 1.0
    norm = np.linalg.norm(out)
    return out / norm if norm > 0 else out


def load_word_vectors(path: str) -> dict[str, np.ndarray]:
    vectors: dict[str, np.ndarray] = {}
    width = None
    for ln, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        parts = line.split(" ")
        try:
            vec = np.asarray([float(p) for p in parts[1:]])
        except ValueError:
            raise ParseError(f"{path}:{ln}: non-numeric vector component") from None
        if width is None:
            width = len(vec)
        if len(vec) != width or width == 0:
            raise ParseError(f"{path}:{ln}: inconsistent vector width")
        vectors[parts[0]] = vec
    return vectors


def build_name_features(names: list[str], word_vectors: dict[str, np.ndarray] | None,
                        bigram_dim: int = 512) -> np.ndarray:
    """Mean word vector (when a map is given) next to hashed bigram counts.

    Entities whose tokens are all unmapped get a zero word segment;
    without a map the word segment is omitted entirely.
    """
    bigrams = np.stack([hashed_bigram_vector(name, bigram_dim) for name in names])
    if word_vectors is None:
        return bigrams
    width = len(next(iter(word_vectors.values())))
    words = np.zeros((len(names), width))
    for i, name in enumerate(names):
        hits = [word_vectors[t] for t in name.lower().split() if t in word_vectors]
        if hits:
            words[i] = np.mean(hits, axis=0)
    return np.concatenate([words, bigrams], axis=1)


def load_image_features(path: str | None, n_entities: int, img_dim: int, rng_seed: int):
    """Dense image feature rows plus a coverage mask.

    Entities absent from the file (or the whole side, when path is None
    or missing) get seeded standard-normal rows and mask False. The
    random fill for all rows is drawn first, so which entities are
    covered does not change the fill of uncovered ones.
    """
    if path is not None and os.path.exists(path):
        parsed: dict[int, np.ndarray] = {}
        width = None
        for ln, line in enumerate(_read_lines(path), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{ln}: expected 'id<TAB>floats'")
            try:
                ent = int(parts[0])
                vec = np.asarray([float(p) for p in parts[1].split()])
            except ValueError:
                raise ParseError(f"{path}:{ln}: malformed feature row") from None
            if not 0 <= ent < n_entities:
                raise ValidationError(f"{path}:{ln}: entity id out of range")
            if width is None:
                width = len(vec)
            if len(vec) != width or width == 0:
                raise ParseError(f"{path}:{ln}: inconsistent feature width")
            parsed[ent] = vec
        img_dim = width if width is not None else img_dim
    else:
        parsed = {}
    rows = np.random.default_rng(rng_seed).standard_normal((n_entities, img_dim))
    mask = np.zeros(n_entities, dtype=bool)
    for ent, vec in parsed.items():
        rows[ent] = vec
        mask[ent] = True
    return rows, mask


def _image_width(path: str) -> int | None:
    if not os.path.exists(path):
        return None
    for line in _read_lines(path):
        if line.strip():
            return len(line.split("\t")[-1].split())
    return None


def build_feature_bundle(pair: KgPair, data_dir: str, bigram_dim: int = 512,
                         img_dim: int = 100, rng_seed: int = 0) -> FeatureBundle:
    """Assemble merged-entity features and the union adjacency.

    The adjacency is the deduplicated undirected edge list of both
    graphs (no cross-graph edges) plus one self-loop per entity, sorted
    by (destination, source).
    """
    kg1, kg2 = pair.kg1, pair.kg2
    n1, n2 = kg1.n_entities, kg2.n_entities

    rel1, attr1 = build_bow_features(kg1)
    rel2, attr2 = build_bow_features(kg2)
    u_rel = _block_stack(rel1, rel2)
    u_attr = _block_stack(attr1, attr2)

    wv_path = os.path.join(data_dir, "word_vectors.txt")
    word_vectors = load_word_vectors(wv_path) if os.path.exists(wv_path) else None
    name1 = build_name_features(kg1.names, word_vectors, bigram_dim)
    name2 = build_name_features(kg2.names, word_vectors, bigram_dim)
    u_name = np.concatenate([name1, name2], axis=0)

    img_path_1 = os.path.join(data_dir, "img_features_1")
    img_path_2 = os.path.join(data_dir, "img_features_2")
    w1, w2 = _image_width(img_path_1), _image_width(img_path_2)
    if w1 is not None and w2 is not None and w1 != w2:
        raise ValidationError(f"image feature widths differ between sides: {w1} vs {w2}")
    width = w1 if w1 is not None else (w2 if w2 is not None else img_dim)
    seeds = np.random.SeedSequence(rng_seed).generate_state(2)
    img1, mask1 = load_image_features(img_path_1, n1, width, int(seeds[0]))
    img2, mask2 = load_image_features(img_path_2, n2, width, int(seeds[1]))

    dst, src = _union_adjacency(kg1.triples, kg2.triples, n1, n2)
    return FeatureBundle(
        n1=n1,
        n2=n2,
        u_rel=u_rel,
        u_attr=u_attr,
        u_name=u_name,
        image_rows=np.concatenate([img1, img2], axis=0),
        image_mask=np.concatenate([mask1, mask2]),
        edges_dst=dst,
        edges_src=src,
    )


def _block_stack(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0], a.shape[1] + b.shape[1]))
    out[: a.shape[0], : a.shape[1]] = a
    out[a.shape[0]:, a.shape[1]:] = b
    return out


def _union_adjacency(triples1: np.ndarray, triples2: np.ndarray, n1: int, n2: int):
    parts = [np.stack([np.arange(n1 + n2), np.arange(n1 + n2)], axis=1)]
    for triples, offset in ((triples1, 0), (triples2, n1)):
        if triples.size:
            h, t = triples[:, 0] + offset, triples[:, 2] + offset
            parts.append(np.stack([h, t], axis=1))
            parts.append(np.stack([t, h], axis=1))
    edges = np.unique(np.concatenate(parts, axis=0), axis=0)
    return edges[:, 0].astype(np.int64), edges[:, 1].astype(np.int64)


# ---------- writing and synthesis ----------


def _fmt_vec(vec: np.ndarray) -> str:
    return " ".join(format(v, ".9g") for v in vec)


def write_dataset(out_dir: str, kg1: Kg, kg2: Kg, ref_pairs: np.ndarray,
                  img1=None, img2=None, word_vectors=None) -> None:
    """Write a dataset in the on-disk layout; inverse of load_kg_pair.

    img1/img2 are optional (ids, rows) pairs; word_vectors an optional
    token -> vector dict written in sorted token order.
    """
    os.makedirs(out_dir, exist_ok=True)

    def emit(fname, lines):
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(line + "\n" for line in lines)

    for side, kg in (("1", kg1), ("2", kg2)):
        emit(f"ent_ids_{side}", (f"{i}\t{name}" for i, name in enumerate(kg.names)))
        emit(f"triples_{side}", (f"{h}\t{r}\t{t}" for h, r, t in kg.triples))
        emit(f"attrs_{side}", (f"{e}\t{a}" for e, a in kg.attr_pairs))
    emit("ref_ent_ids", (f"{a}\t{b}" for a, b in ref_pairs))
    for side, img in (("1", img1), ("2", img2)):
        if img is not None:
            ids, rows = img
            emit(f"img_features_{side}", (f"{i}\t{_fmt_vec(rows[i])}" for i in ids))
    if word_vectors is not None:
        emit(
            "word_vectors.txt",
            (f"{tok} {_fmt_vec(vec)}" for tok, vec in sorted(word_vectors.items())),
        )


@dataclass
class SynthSpec:
    """Knobs for the paired synthetic generator.

    KG2 is an isomorphic copy of KG1 under a hidden permutation;
    p_drop replaces that fraction of copied triples/attribute pairs with
    random ones, and feature_noise corrupts the copy's surface data:
    each digit of a KG2 name resamples with that probability and image
    rows get Gaussian noise of twice that scale.
    """

    n_entities: int = 200
    n_relations: int = 10
    n_attributes: int = 20
    edge_factor: float = 5.0
    attr_factor: float = 3.0
    p_drop: float = 0.0
    feature_noise: float = 0.0
    latent_dim: int = 16
    img_dim: int = 16
    img_coverage: float = 1.0

    def validate(self) -> None:
        checks = [
            (self.n_entities >= 4, "n_entities must be >= 4"),
            (self.n_relations >= 1, "n_relations must be >= 1"),
            (self.n_attributes >= 1, "n_attributes must be >= 1"),
            (self.edge_factor >= 1.0, "edge_factor must be >= 1"),
            (self.attr_factor >= 0.0, "attr_factor must be >= 0"),
            (0.0 <= self.p_drop < 1.0, "p_drop must be in [0, 1)"),
            (self.feature_noise >= 0.0, "feature_noise must be >= 0"),
            (self.latent_dim >= 1, "latent_dim must be >= 1"),
            (self.img_dim >= 1, "img_dim must be >= 1"),
            (0.0 < self.img_coverage <= 1.0, "img_coverage must be in (0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(f"synthetic spec: {msg}")


def _random_triples(rng, n, n_rel, count):
    h = rng.integers(0, n, size=count)
    t = (h + rng.integers(1, n, size=count)) % n
    r = rng.integers(0, n_rel, size=count)
    return np.stack([h, r, t], axis=1)


def _perturb(rng, rows: np.ndarray, p_drop: float, fresh) -> np.ndarray:
    if p_drop == 0.0 or rows.size == 0:
        return rows
    keep = rng.random(len(rows)) >= p_drop
    replacement = fresh(int((~keep).sum()))
    return np.concatenate([rows[keep], replacement], axis=0)


def generate_synthetic(spec: SynthSpec, rng_seed: int, out_dir: str) -> np.ndarray:
    """Write a synthetic dataset pair; returns the hidden permutation.

    With feature_noise 0 aligned entities share identical, unique name
    strings, so their name features match exactly. With positive noise
    every digit of the side-2 name resamples independently with
    probability min(1, noise) — which can even collide with another
    entity's name — and image rows get Gaussian noise of scale
    2 * noise on both sides. Word vectors exist only for the canonical
    side-1 tokens, so corrupted names also lose their word-vector
    channel.
    """
    spec.validate()
    rng = np.random.default_rng(rng_seed)
    n, sigma = spec.n_entities, spec.feature_noise

    latents = rng.standard_normal((n, spec.latent_dim))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    perm = rng.permutation(n)

    triples1 = _random_triples(rng, n, spec.n_relations, int(n * spec.edge_factor))
    attrs1 = np.stack(
        [rng.integers(0, n, size=int(n * spec.attr_factor)),
         rng.integers(0, spec.n_attributes, size=int(n * spec.attr_factor))],
        axis=1,
    )
    triples2 = triples1.copy()
    triples2[:, 0] = perm[triples1[:, 0]]
    triples2[:, 2] = perm[triples1[:, 2]]
    triples2 = _perturb(rng, triples2, spec.p_drop,
                        lambda k: _random_triples(rng, n, spec.n_relations, k))
    attrs2 = attrs1.copy()
    attrs2[:, 0] = perm[attrs1[:, 0]]
    attrs2 = _perturb(
        rng, attrs2, spec.p_drop,
        lambda k: np.stack([rng.integers(0, n, size=k),
                            rng.integers(0, spec.n_attributes, size=k)], axis=1),
    )

    word_vectors = {f"ent{i:05d}": latents[i] for i in range(n)}
    names1 = [f"ent{i:05d}" for i in range(n)]
    names2 = [""] * n
    for i in range(n):
        token = f"{i:05d}"
        if sigma > 0.0:
            digits = list(token)
            for k in np.flatnonzero(rng.random(len(digits)) < min(1.0, sigma)):
                digits[k] = str(rng.integers(0, 10))
            token = "".join(digits)
        names2[perm[i]] = f"ent{token}"

    proj = rng.standard_normal((spec.latent_dim, spec.img_dim)) / math.sqrt(spec.latent_dim)
    img_noise = 2.0 * sigma
    img1 = latents @ proj + img_noise * rng.standard_normal((n, spec.img_dim))
    img2 = np.empty_like(img1)
    img2[perm] = latents @ proj + img_noise * rng.standard_normal((n, spec.img_dim))
    if spec.img_coverage < 1.0:
        count = max(1, int(round(spec.img_coverage * n)))
        ids1 = np.sort(rng.choice(n, size=count, replace=False))
        ids2 = np.sort(rng.choice(n, size=count, replace=False))
    else:
        ids1 = ids2 = np.arange(n)

    kg1 = Kg(names1, triples1, attrs1, spec.n_relations, spec.n_attributes)
    kg2 = Kg(names2, triples2, attrs2, spec.n_relations, spec.n_attributes)
    refs = np.stack([np.arange(n), perm], axis=1)
    write_dataset(out_dir, kg1, kg2, refs, img1=(ids1, img1), img2=(ids2, img2),
                  word_vectors=word_vectors)
    return perm

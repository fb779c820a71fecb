"""Node semantics: code segmentation, TF-IDF encoding, segment-feature files,
code-user co-attention fusion, and attention aggregation over per-repo
file-structure trees.
"""

from __future__ import annotations

import hashlib
import math
import re
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dataset import DataFormatError, DataIntegrityError, Dataset, SparseBinary

FEATURE_MAGIC = b"CFEA"
FEATURE_VERSION = 1

_TOKEN_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|\d+|[^\sA-Za-z0-9_]")
_CAMEL_RE = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+")


def tokenize_source(text: str) -> list:
    """Whitespace/punctuation lexer; identifiers and numbers stay whole."""
    return _TOKEN_RE.findall(text)


def segment_code(tokens, n_segments: int) -> list:
    """Partition tokens into n_segments contiguous runs of equal length.

    The last nonempty segment may be shorter; missing segments are empty.
    Concatenating the result reproduces the input order exactly.
    """
    if n_segments <= 0:
        raise ValueError(f"segment count must be positive, got {n_segments}")
    if not tokens:
        return [[] for _ in range(n_segments)]
    size = math.ceil(len(tokens) / n_segments)
    segments = [list(tokens[i * size:(i + 1) * size]) for i in range(n_segments)]
    return segments


def split_name_words(name: str) -> list:
    """Split an identifier into lowercase words at underscores and case changes."""
    words = []
    for chunk in re.split(r"[^0-9A-Za-z]+", name):
        words.extend(w.lower() for w in _CAMEL_RE.findall(chunk))
    return words


# ---------------------------------------------------------------------------
# TF-IDF


class TfidfModel:
    """Raw-count TF times log(N/df), vocabulary fixed at fit time."""

    def __init__(self, documents, max_features=None):
        self.n_docs = len(documents)
        df = {}
        for doc in documents:
            for tok in set(doc):
                df[tok] = df.get(tok, 0) + 1
        items = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_features is not None:
            items = items[:max_features]
        self.vocab = {tok: i for i, tok in enumerate(sorted(tok for tok, _ in items))}
        self.idf = np.zeros(len(self.vocab), dtype=np.float64)
        for tok, i in self.vocab.items():
            self.idf[i] = math.log(self.n_docs / df[tok])

    @property
    def size(self):
        return len(self.vocab)

    def encode(self, tokens) -> np.ndarray:
        vec = np.zeros(self.size, dtype=np.float64)
        for tok in tokens:
            i = self.vocab.get(tok)
            if i is not None:
                vec[i] += 1.0
        return vec * self.idf


def encode_segments_tfidf(segments, model: TfidfModel) -> np.ndarray:
    """One TF-IDF row per code segment; OOV tokens ignored, empty rows zero."""
    return np.stack([model.encode(seg) for seg in segments]) if segments else \
        np.zeros((0, model.size))


# ---------------------------------------------------------------------------
# segment-feature binary format ("CFEA")


def write_feature_file(path, ids, array: np.ndarray):
    """Write segment features: header, row-major f32 payload, id footer."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim != 3 or arr.shape[0] != len(ids):
        raise ValueError(f"expected (n_files, n_segments, dim) matching {len(ids)} ids, got {arr.shape}")
    n_files, n_c, d_in = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", FEATURE_VERSION, n_files, n_c, d_in))
        fh.write(arr.tobytes())
        fh.write(struct.pack("<I", len(ids)))
        for raw in ids:
            blob = str(raw).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def read_feature_file(path):
    """Read a CFEA file back into (ids, float32 array of shape (N, N_C, d_in))."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 20 or data[:4] != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: not a segment-feature file (bad magic)")
    version, n_files, n_c, d_in = struct.unpack_from("<IIII", data, 4)
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported feature-file version {version}")
    payload_len = n_files * n_c * d_in * 4
    off = 20
    if len(data) < off + payload_len + 4:
        raise DataFormatError(f"{path}: truncated payload "
                              f"(need {payload_len} bytes, have {len(data) - off})")
    arr = np.frombuffer(data, dtype="<f4", count=n_files * n_c * d_in, offset=off)
    arr = arr.reshape(n_files, n_c, d_in).copy()
    off += payload_len
    (n_ids,) = struct.unpack_from("<I", data, off)
    off += 4
    if n_ids != n_files:
        raise DataFormatError(f"{path}: footer lists {n_ids} ids for {n_files} rows")
    ids = []
    for _ in range(n_ids):
        if len(data) < off + 4:
            raise DataFormatError(f"{path}: truncated footer")
        (blen,) = struct.unpack_from("<I", data, off)
        off += 4
        if len(data) < off + blen:
            raise DataFormatError(f"{path}: truncated footer id")
        ids.append(data[off:off + blen].decode("utf-8"))
        off += blen
    if off != len(data):
        raise DataFormatError(f"{path}: {len(data) - off} trailing bytes after footer")
    return ids, arr


def validate_feature_file(path):
    """Raise DataFormatError unless the file parses; return (n_files, n_c, d_in)."""
    ids, arr = read_feature_file(path)
    if not np.isfinite(arr).all():
        raise DataFormatError(f"{path}: non-finite feature values")
    return arr.shape


def import_segment_features(path, dataset: Dataset) -> dict:
    """Map dense file index -> (N_C, d_in) matrix. Files absent from the
    feature file get zero rows; footer ids must exist in the dataset."""
    ids, arr = read_feature_file(path)
    fmap = {raw: i for i, raw in enumerate(dataset.files)}
    out = {}
    for pos, raw in enumerate(ids):
        if raw not in fmap:
            raise DataIntegrityError(f"{path}: footer id {raw!r} not in dataset")
        out[fmap[raw]] = arr[pos]
    n_c, d_in = (arr.shape[1], arr.shape[2]) if len(ids) else (0, 0)
    for idx in range(dataset.n_files):
        if idx not in out:
            out[idx] = np.zeros((n_c, d_in), dtype=np.float32)
    return out


def stack_segment_features(feature_map: dict, n_files: int) -> np.ndarray:
    return np.stack([feature_map[i] for i in range(n_files)])


# ---------------------------------------------------------------------------
# historical-user sampling


def sample_historical_users(file_index: int, y_train: SparseBinary, n_rows: int, seed: int):
    """Pick n_rows train-time contributors of a file.

    Uniform without replacement when enough exist; cycled otherwise. Returns
    (indices, has_contributors); with zero contributors the rows are to be
    masked to zero by the caller.
    """
    contributors = y_train.rows_of(file_index)
    if len(contributors) == 0:
        return np.zeros(n_rows, dtype=np.int64), False
    rng = np.random.default_rng([int(seed), int(file_index)])
    if len(contributors) >= n_rows:
        picked = rng.choice(contributors, size=n_rows, replace=False)
    else:
        perm = rng.permutation(contributors)
        picked = np.resize(perm, n_rows)
    return picked.astype(np.int64), True


# ---------------------------------------------------------------------------
# co-attention fusion


@dataclass
class FusionParams:
    p_in: ad.Tensor   # d_in x d input projection
    w_o: ad.Tensor    # d x d affinity weights
    w_c: ad.Tensor    # n_att x d
    w_q: ad.Tensor    # n_att x d
    w_h: ad.Tensor    # n_att

    def tensors(self):
        return [self.p_in, self.w_o, self.w_c, self.w_q, self.w_h]


def init_fusion_params(d_in: int, d: int, n_att: int, seed: int, dtype="f32") -> FusionParams:
    p = FusionParams(
        p_in=ad.xavier_init((d_in, d), seed * 7 + 1, dtype),
        w_o=ad.xavier_init((d, d), seed * 7 + 2, dtype),
        w_c=ad.xavier_init((n_att, d), seed * 7 + 3, dtype),
        w_q=ad.xavier_init((n_att, d), seed * 7 + 4, dtype),
        w_h=ad.xavier_init((n_att,), seed * 7 + 5, dtype),
    )
    for name in ("p_in", "w_o", "w_c", "w_q", "w_h"):
        getattr(p, name).name = f"fusion.{name}"
    return p


def coattention_fuse_batch(c: ad.Tensor, q: ad.Tensor, params: FusionParams):
    """Fuse projected code segments with historical-user rows.

    c: (F, N_C, d) projected segment features; q: (F, N_Q, d) user rows.
    Returns (h, attn): h is (F, d), attn is (F, N_C) nonnegative rows
    summing to one. The fused vector is a convex combination of c's rows.
    """
    affinity = ad.tanh(ad.matmul(ad.matmul(c, params.w_o), ad.transpose(q)))   # (F, N_C, N_Q)
    lq = ad.matmul(affinity, q)                                                # (F, N_C, d)
    amap = ad.tanh(ad.add(ad.matmul(params.w_c, ad.transpose(c)),
                          ad.matmul(params.w_q, ad.transpose(lq))))            # (F, n_att, N_C)
    n_att = params.w_h.data.shape[0]
    logits = ad.matmul(ad.reshape(params.w_h, (1, n_att)), amap)               # (F, 1, N_C)
    attn = ad.softmax_rows(logits)
    fused = ad.matmul(attn, c)                                                 # (F, 1, d)
    f, _, d = fused.data.shape
    return ad.reshape(fused, (f, d)), ad.reshape(attn, (f, attn.data.shape[-1]))


def coattention_fuse(c: ad.Tensor, q: ad.Tensor, params: FusionParams):
    """Single-file convenience wrapper: c is (N_C, d), q is (N_Q, d)."""
    c3 = ad.reshape(c, (1,) + c.data.shape)
    q3 = ad.reshape(q, (1,) + q.data.shape)
    h, attn = coattention_fuse_batch(c3, q3, params)
    return ad.reshape(h, (h.data.shape[1],)), ad.reshape(attn, (attn.data.shape[1],))


# ---------------------------------------------------------------------------
# per-repo structure graphs


OWNER_HASH_BUCKETS = 16


def _stable_bucket(text: str, buckets: int) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % buckets


@dataclass
class StructureGraph:
    """Union of all per-repo trees: files [0,F), dirs [F,F+D), roots [F+D,F+D+R)."""

    n_files: int
    n_dirs: int
    n_repos: int
    edge_src: np.ndarray  # directed, both orientations of every parent edge
    edge_dst: np.ndarray
    dir_features: np.ndarray   # (D, dir vocab) constant TF-IDF of name words
    repo_features: np.ndarray  # (R, owner buckets + 1 + languages) constants

    @property
    def n_nodes(self):
        return self.n_files + self.n_dirs + self.n_repos

    def root_index(self, repo: int) -> int:
        return self.n_files + self.n_dirs + repo


def build_structure_graph(dataset: Dataset) -> StructureGraph:
    """Assemble hierarchy edges and constant node features for dirs and repos.

    Directory features are TF-IDF over name words split at underscores and
    capitalization; repo features concatenate an owner-hash one-hot, the
    min-max normalized creation time, and a top-5 language multi-hot.
    """
    f_off, d_off = 0, dataset.n_files
    r_off = dataset.n_files + dataset.n_dirs

    def resolve(ref):
        kind, idx = ref
        return r_off + idx if kind == "root" else d_off + idx

    up_src, up_dst = [], []
    for i, ref in enumerate(dataset.file_parent):
        up_src.append(f_off + i)
        up_dst.append(resolve(ref))
    for i, ref in enumerate(dataset.dir_parent):
        up_src.append(d_off + i)
        up_dst.append(resolve(ref))
    up_src = np.asarray(up_src, dtype=np.int64)
    up_dst = np.asarray(up_dst, dtype=np.int64)
    src = np.concatenate([up_src, up_dst])
    dst = np.concatenate([up_dst, up_src])

    name_docs = [split_name_words(n) for n in dataset.dir_names]
    if name_docs:
        tfidf = TfidfModel(name_docs)
        dir_features = np.stack([tfidf.encode(doc) for doc in name_docs]) \
            if tfidf.size else np.zeros((dataset.n_dirs, 1))
    else:
        dir_features = np.zeros((0, 1))

    langs = sorted({lang for row in dataset.repo_languages for lang in row})
    lang_pos = {lang: i for i, lang in enumerate(langs)}
    created = np.asarray(dataset.repo_created, dtype=np.float64)
    span = created.max() - created.min() if len(created) else 0.0
    norm_created = (created - created.min()) / span if span > 0 else np.zeros_like(created)
    repo_features = np.zeros((dataset.n_repos, OWNER_HASH_BUCKETS + 1 + len(langs)))
    for k in range(dataset.n_repos):
        repo_features[k, _stable_bucket(dataset.repo_owners[k], OWNER_HASH_BUCKETS)] = 1.0
        repo_features[k, OWNER_HASH_BUCKETS] = norm_created[k]
        for lang in dataset.repo_languages[k][:5]:
            repo_features[k, OWNER_HASH_BUCKETS + 1 + lang_pos[lang]] = 1.0

    return StructureGraph(
        n_files=dataset.n_files, n_dirs=dataset.n_dirs, n_repos=dataset.n_repos,
        edge_src=src, edge_dst=dst,
        dir_features=dir_features, repo_features=repo_features,
    )


# ---------------------------------------------------------------------------
# attention aggregation on the structure graph


@dataclass
class GATParams:
    weights: list   # per layer: d x d linear map
    att_src: list   # per layer: d
    att_dst: list   # per layer: d

    def tensors(self):
        out = []
        for w, s, t in zip(self.weights, self.att_src, self.att_dst):
            out.extend([w, s, t])
        return out


def init_gat_params(d: int, n_layers: int, seed: int, dtype="f32") -> GATParams:
    weights, att_src, att_dst = [], [], []
    for layer in range(n_layers):
        w = ad.xavier_init((d, d), seed * 13 + 3 * layer + 1, dtype)
        s = ad.xavier_init((d,), seed * 13 + 3 * layer + 2, dtype)
        t = ad.xavier_init((d,), seed * 13 + 3 * layer + 3, dtype)
        w.name, s.name, t.name = (f"gat.{layer}.w", f"gat.{layer}.att_src", f"gat.{layer}.att_dst")
        weights.append(w)
        att_src.append(s)
        att_dst.append(t)
    return GATParams(weights, att_src, att_dst)


def gat_layer(x: ad.Tensor, src: np.ndarray, dst: np.ndarray, w: ad.Tensor,
              a_src: ad.Tensor, a_dst: ad.Tensor, slope: float = 0.2):
    """One single-head attention layer over a directed edge list.

    Edges must include self-loops so every node has an incoming message.
    Returns (aggregated, attention) where attention holds the per-edge
    coefficients, normalized over each destination's incoming edges.
    """
    n = x.data.shape[0]
    xp = ad.matmul(x, w)
    d = xp.data.shape[1]
    score_src = ad.matmul(xp, ad.reshape(a_src, (d, 1)))
    score_dst = ad.matmul(xp, ad.reshape(a_dst, (d, 1)))
    logits = ad.leaky_relu(ad.add(ad.gather_rows(score_src, src),
                                  ad.gather_rows(score_dst, dst)), slope)
    # shift by the per-destination max; softmax is shift-invariant so the
    # constant shift leaves values and gradients exact
    shift = np.full(n, -np.inf, dtype=logits.data.dtype)
    np.maximum.at(shift, dst, logits.data[:, 0])
    shifted = ad.sub(logits, ad.Tensor(shift[dst][:, None]))
    expd = ad.exp(shifted)
    denom = ad.gather_rows(ad.segment_sum(expd, dst, n), dst)
    attn = ad.div(expd, denom)
    out = ad.segment_sum(ad.mul(attn, ad.gather_rows(xp, src)), dst, n)
    return out, attn


def structural_aggregate(graph: StructureGraph, node_features: ad.Tensor,
                         params: GATParams, slope: float = 0.2) -> ad.Tensor:
    """Stacked attention layers over the (bidirectional, self-looped) tree."""
    n = graph.n_nodes
    loops = np.arange(n, dtype=np.int64)
    src = np.concatenate([graph.edge_src, loops])
    dst = np.concatenate([graph.edge_dst, loops])
    h = node_features
    n_layers = len(params.weights)
    for layer in range(n_layers):
        h, _ = gat_layer(h, src, dst, params.weights[layer],
                         params.att_src[layer], params.att_dst[layer], slope)
        if layer < n_layers - 1:
            h = ad.tanh(h)
    return h

"""The full recommendation model: parameter set, forward pass over both
interaction levels, BPR + contrastive objectives, and the training loop.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import behavior as bh
from . import semantics as sem
from .dataset import Dataset, DatasetSplit, DataIntegrityError, InteractionMatrices

CHECKPOINT_MAGIC = b"CRCK"
CHECKPOINT_VERSION = 1


class ResampleError(Exception):
    """A user has interacted with every candidate; no negative exists."""


@dataclass
class Hyperparams:
    d: int = 32
    layers: int = 4            # propagation depth, both levels
    n_segments: int = 8        # code segments per file
    n_hist_users: int = 4      # sampled historical users per file
    n_att: int = 32            # attention-map rows in the fusion block
    lambda_project: float = 0.1
    lambda_contrast: float = 1e-6
    lambda_reg: float = 1e-3
    tau: float = 0.1
    eta: int = 2               # contrastive propagation depth, must be even
    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 200
    patience: int = 10
    eval_every: int = 1
    behaviors: tuple = ("star", "watch")
    gat_layers: int = 3
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.eta % 2 != 0:
            raise ValueError(f"eta must be even, got {self.eta}")
        if self.eta > self.layers:
            raise ValueError(f"eta ({self.eta}) cannot exceed layer count ({self.layers})")
        self.behaviors = tuple(self.behaviors)


@dataclass
class AblationFlags:
    disable_fusion: bool = False       # CD-F
    disable_contrastive: bool = False  # CD-C
    tfidf_features: bool = False       # CD-E (feature source, handled at encode time)
    disable_project_level: bool = False  # CD-P
    disable_structural: bool = False   # CD-S

    def variant_tag(self) -> str:
        letters = ""
        for flag, letter in (
            (self.disable_fusion, "F"), (self.disable_contrastive, "C"),
            (self.tfidf_features, "E"), (self.disable_project_level, "P"),
            (self.disable_structural, "S"),
        ):
            if flag:
                letters += letter
        return "CD" if not letters else "CD-" + "-".join(letters)


def bpr_loss(pos_scores: ad.Tensor, neg_scores: ad.Tensor) -> ad.Tensor:
    """Mean of -log sigmoid(pos - neg) over the batch."""
    return ad.reduce_mean(ad.softplus(ad.sub(neg_scores, pos_scores)))


def contrastive_loss(anchor: ad.Tensor, positive: ad.Tensor, tau: float) -> ad.Tensor:
    """InfoNCE between per-row pairs with in-batch negatives.

    Rows are L2-normalized; row i of `anchor` is pulled to row i of
    `positive` against all other rows. A single-row batch gives exactly 0.
    """
    a = ad.l2_normalize_rows(anchor)
    p = ad.l2_normalize_rows(positive)
    logits = ad.scale(ad.matmul(a, ad.transpose(p)), 1.0 / tau)
    return ad.reduce_mean(ad.sub(ad.logsumexp_rows(logits), ad.take_diag(logits)))


def aggregate_behaviors(vectors: list) -> ad.Tensor:
    """Elementwise mean over per-behavior representations."""
    if not vectors:
        raise ValueError("behavior set is empty but project-level modeling is enabled")
    return ad.mean_over(vectors)


def sample_negatives(user: int, y_train, n: int, seed) -> np.ndarray:
    """Uniform file negatives outside the user's train positives."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    positives = set(y_train.cols_of(user).tolist())
    if len(positives) >= y_train.cols:
        raise ResampleError(f"user {user} interacted with every file")
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        for _ in range(64):
            cand = int(rng.integers(y_train.cols))
            if cand not in positives:
                out[i] = cand
                break
        else:
            pool = np.setdiff1d(np.arange(y_train.cols), np.fromiter(positives, dtype=np.int64))
            out[i] = int(rng.choice(pool))
    return out


@dataclass
class _Mlp:
    w1a: ad.Tensor
    w1b: ad.Tensor  # acts on the project-level half; dropped from params under CD-P
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor


def _init_mlp(d: int, seed: int, dtype, prefix: str) -> _Mlp:
    m = _Mlp(
        w1a=ad.xavier_init((d, d), seed + 1, dtype),
        w1b=ad.xavier_init((d, d), seed + 2, dtype),
        b1=ad.Tensor(np.zeros(d), requires_grad=True, dtype=dtype),
        w2=ad.xavier_init((d, d), seed + 3, dtype),
        b2=ad.Tensor(np.zeros(d), requires_grad=True, dtype=dtype),
    )
    for name in ("w1a", "w1b", "b1", "w2", "b2"):
        getattr(m, name).name = f"{prefix}.{name}"
    return m


class RecModel:
    """Holds parameters plus the static graph structures derived from a split."""

    def __init__(self, dataset: Dataset, split: DatasetSplit, matrices: InteractionMatrices,
                 segment_features: np.ndarray, hyper: Hyperparams,
                 flags: AblationFlags | None = None, seed: int = 0, dtype: str = "f32"):
        self.dataset = dataset
        self.split = split
        self.matrices = matrices
        self.hyper = hyper
        self.flags = flags or AblationFlags()
        self.seed = seed
        self.dtype = dtype
        np_dtype = ad.DTYPES[dtype]

        if segment_features.ndim != 3 or segment_features.shape[0] != dataset.n_files:
            raise ValueError(f"segment features must be (n_files, n_segments, d_in), "
                             f"got {segment_features.shape}")
        if segment_features.shape[1] != hyper.n_segments:
            raise ValueError(f"feature file has {segment_features.shape[1]} segments per file, "
                             f"config expects {hyper.n_segments}")
        self.seg_features = ad.Tensor(segment_features.astype(np_dtype))
        self.d_in = segment_features.shape[2]

        self.use_project = (not self.flags.disable_project_level) and len(hyper.behaviors) > 0
        if not self.flags.disable_project_level and not hyper.behaviors:
            raise ValueError("project-level modeling enabled with an empty behavior set")

        d = hyper.d
        self.a_hat = bh.normalize_adjacency(matrices.Y, dtype=np_dtype)
        self.lambda_hat = {t: bh.normalize_adjacency(matrices.S[t], dtype=np_dtype)
                           for t in hyper.behaviors}
        self.graph = sem.build_structure_graph(dataset)
        self.phi = dataset.file_repo

        q_idx = np.zeros((dataset.n_files, hyper.n_hist_users), dtype=np.int64)
        q_mask = np.zeros((dataset.n_files, 1, 1), dtype=np_dtype)
        for j in range(dataset.n_files):
            idx, ok = sem.sample_historical_users(j, matrices.Y, hyper.n_hist_users, seed)
            q_idx[j] = idx
            q_mask[j] = 1.0 if ok else 0.0
        self.q_idx = q_idx
        self.q_mask = ad.Tensor(q_mask)

        # trainable parameters
        self.user_emb = ad.xavier_init((dataset.n_users, d), seed * 101 + 11, dtype)
        self.user_emb.name = "user_emb"
        self.fusion = sem.init_fusion_params(self.d_in, d, hyper.n_att, seed * 101 + 23, dtype)
        self.gat = sem.init_gat_params(d, hyper.gat_layers, seed * 101 + 31, dtype)
        self.p_dir = ad.xavier_init((max(self.graph.dir_features.shape[1], 1), d),
                                    seed * 101 + 41, dtype)
        self.p_dir.name = "p_dir"
        self.p_repo = ad.xavier_init((self.graph.repo_features.shape[1], d),
                                     seed * 101 + 43, dtype)
        self.p_repo.name = "p_repo"
        self.mlp_u = _init_mlp(d, seed * 101 + 53, dtype, "mlp_u")
        self.mlp_v = _init_mlp(d, seed * 101 + 67, dtype, "mlp_v")

        self._dir_feats = ad.Tensor(self.graph.dir_features.astype(np_dtype))
        self._repo_feats = ad.Tensor(self.graph.repo_features.astype(np_dtype))

        # node-semantics outputs depend only on parameters; when the cache is
        # enabled (frozen-params serving), inference passes reuse them until a
        # training step bumps params_version
        self.use_semantics_cache = False
        self.params_version = 0
        self._sem_cache = None
        self._sem_cache_version = -1

        # per-user positive sets for negative sampling
        self._user_pos = [set(matrices.Y.cols_of(u).tolist()) for u in range(dataset.n_users)]
        self._user_repos = {
            t: [set(matrices.S[t].cols_of(u).tolist()) for u in range(dataset.n_users)]
            for t in hyper.behaviors
        }

    # -- parameter registry ------------------------------------------------

    def params(self) -> list:
        out = [self.user_emb, self.fusion.p_in]
        if not self.flags.disable_fusion:
            out += [self.fusion.w_o, self.fusion.w_c, self.fusion.w_q, self.fusion.w_h]
        if not self.flags.disable_structural:
            out += self.gat.tensors()
            out.append(self.p_dir)
        if not self.flags.disable_structural or self.use_project:
            out.append(self.p_repo)
        for mlp in (self.mlp_u, self.mlp_v):
            out += [mlp.w1a, mlp.b1, mlp.w2, mlp.b2]
            if self.use_project:
                out.append(mlp.w1b)
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    # -- forward -----------------------------------------------------------

    def _mlp_apply(self, mlp: _Mlp, main: ad.Tensor, side: ad.Tensor | None) -> ad.Tensor:
        hidden = ad.add(ad.matmul(main, mlp.w1a), mlp.b1)
        if side is not None:
            hidden = ad.add(hidden, ad.matmul(side, mlp.w1b))
        hidden = ad.leaky_relu(hidden, self.hyper.leaky_slope)
        return ad.add(ad.matmul(hidden, mlp.w2), mlp.b2)

    def _node_semantics(self) -> tuple:
        """Fused file vectors v0 and repo vectors r0 (pre-propagation)."""
        ds, hp = self.dataset, self.hyper
        n_f, n_r = ds.n_files, ds.n_repos
        c_proj = ad.matmul(self.seg_features, self.fusion.p_in)      # (F, N_C, d)
        if self.flags.disable_fusion:
            h = ad.reduce_mean(c_proj, axis=1)
        else:
            q_rows = ad.gather_rows(self.user_emb, self.q_idx.reshape(-1))
            q_rows = ad.reshape(q_rows, (n_f, hp.n_hist_users, hp.d))
            q_rows = ad.mul(q_rows, self.q_mask)
            h, _ = sem.coattention_fuse_batch(c_proj, q_rows, self.fusion)

        if self.flags.disable_structural:
            v0 = h
            r0 = ad.matmul(self._repo_feats, self.p_repo) if self.use_project else None
        else:
            dir_x = ad.matmul(self._dir_feats, self.p_dir) if ds.n_dirs else \
                ad.Tensor(np.zeros((0, hp.d), dtype=h.data.dtype))
            repo_x = ad.matmul(self._repo_feats, self.p_repo)
            nodes = ad.concat([h, dir_x, repo_x], axis=0)
            tilde = sem.structural_aggregate(self.graph, nodes, self.gat, hp.leaky_slope)
            v0 = ad.gather_rows(tilde, np.arange(n_f))
            r0 = ad.gather_rows(tilde, self.graph.n_files + self.graph.n_dirs + np.arange(n_r))
        return v0, r0

    def compute_representations(self) -> dict:
        """Full forward pass producing every representation the losses need."""
        ds, hp = self.dataset, self.hyper
        n_u, n_f, n_r = ds.n_users, ds.n_files, ds.n_repos

        recording = ad._active_tape() is not None
        if recording or not self.use_semantics_cache:
            v0, r0 = self._node_semantics()
        elif self._sem_cache_version == self.params_version:
            v0, r0 = self._sem_cache
        else:
            v0, r0 = self._node_semantics()
            self._sem_cache = (v0, r0)
            self._sem_cache_version = self.params_version

        e0 = ad.concat([self.user_emb, v0], axis=0)
        stack = bh.propagate(e0, self.a_hat, hp.layers)
        e_star = bh.pool_layers(stack)
        u_star = ad.gather_rows(e_star, np.arange(n_u))
        v_star = ad.gather_rows(e_star, n_u + np.arange(n_f))

        z_star_t, r_star_t = {}, {}
        if self.use_project:
            z0 = ad.concat([self.user_emb, r0], axis=0)
            for t in hp.behaviors:
                stack_t = bh.propagate(z0, self.lambda_hat[t], hp.layers)
                pooled = bh.pool_layers(stack_t)
                z_star_t[t] = ad.gather_rows(pooled, np.arange(n_u))
                r_star_t[t] = ad.gather_rows(pooled, n_u + np.arange(n_r))
            z_star = aggregate_behaviors([z_star_t[t] for t in hp.behaviors])
            r_star = aggregate_behaviors([r_star_t[t] for t in hp.behaviors])
            r_star_files = ad.gather_rows(r_star, self.phi)
        else:
            z_star = r_star = r_star_files = None

        u_final = self._mlp_apply(self.mlp_u, u_star, z_star)
        v_final = self._mlp_apply(self.mlp_v, v_star, r_star_files)

        return {
            "stack": stack, "u_star": u_star, "v_star": v_star,
            "z_star_t": z_star_t, "r_star_t": r_star_t,
            "u_final": u_final, "v_final": v_final,
        }

    def score_all(self) -> np.ndarray:
        """Dense user x file score matrix (inference path, no tape)."""
        rep = self.compute_representations()
        return rep["u_final"].data @ rep["v_final"].data.T

    # -- loss --------------------------------------------------------------

    def batch_loss(self, users: np.ndarray, pos_files: np.ndarray,
                   neg_files: np.ndarray, rng: np.random.Generator,
                   rep: dict | None = None) -> tuple:
        """Total loss over one batch of (user, pos file, neg file) triples."""
        hp = self.hyper
        rep = rep or self.compute_representations()
        u_b = ad.gather_rows(rep["u_final"], users)
        s_pos = ad.reduce_sum(ad.mul(u_b, ad.gather_rows(rep["v_final"], pos_files)), axis=1)
        s_neg = ad.reduce_sum(ad.mul(u_b, ad.gather_rows(rep["v_final"], neg_files)), axis=1)
        loss_file = bpr_loss(s_pos, s_neg)
        parts = {"file_bpr": float(loss_file.data)}
        total = loss_file

        if self.use_project:
            project_terms = []
            for t in hp.behaviors:
                tu, tp, tn = [], [], []
                repo_sets = self._user_repos[t]
                n_repos = self.dataset.n_repos
                for u in np.unique(users):
                    pos_repos = repo_sets[int(u)]
                    if not pos_repos or len(pos_repos) >= n_repos:
                        continue
                    tu.append(int(u))
                    tp.append(int(rng.choice(sorted(pos_repos))))
                    while True:
                        cand = int(rng.integers(n_repos))
                        if cand not in pos_repos:
                            tn.append(cand)
                            break
                if not tu:
                    continue
                z_b = ad.gather_rows(rep["z_star_t"][t], np.array(tu))
                sp = ad.reduce_sum(ad.mul(z_b, ad.gather_rows(rep["r_star_t"][t], np.array(tp))), axis=1)
                sn = ad.reduce_sum(ad.mul(z_b, ad.gather_rows(rep["r_star_t"][t], np.array(tn))), axis=1)
                project_terms.append(bpr_loss(sp, sn))
            if project_terms:
                proj = project_terms[0]
                for term in project_terms[1:]:
                    proj = ad.add(proj, term)
                parts["project_bpr"] = float(proj.data)
                total = ad.add(total, ad.scale(proj, hp.lambda_project))

        if not self.flags.disable_contrastive:
            stack = rep["stack"]
            n_u = self.dataset.n_users
            uniq_users = np.unique(users)
            uniq_files = np.unique(pos_files)
            cu = contrastive_loss(ad.gather_rows(stack[hp.eta], uniq_users),
                                  ad.gather_rows(stack[0], uniq_users), hp.tau)
            cv = contrastive_loss(ad.gather_rows(stack[hp.eta], n_u + uniq_files),
                                  ad.gather_rows(stack[0], n_u + uniq_files), hp.tau)
            contrast = ad.add(cu, cv)
            parts["contrastive"] = float(contrast.data)
            total = ad.add(total, ad.scale(contrast, hp.lambda_contrast))

        sq = None
        for p in self.params():
            term = ad.reduce_sum(ad.mul(p, p))
            sq = term if sq is None else ad.add(sq, term)
        reg = ad.sqrt(sq)
        parts["reg"] = float(reg.data)
        total = ad.add(total, ad.scale(reg, hp.lambda_reg))
        parts["total"] = float(total.data)
        return total, parts

    def _negatives_for(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n_files = self.dataset.n_files
        out = np.empty(len(users), dtype=np.int64)
        for i, u in enumerate(users):
            positives = self._user_pos[int(u)]
            if len(positives) >= n_files:
                raise ResampleError(f"user {int(u)} interacted with every file")
            while True:
                cand = int(rng.integers(n_files))
                if cand not in positives:
                    out[i] = cand
                    break
        return out


# ---------------------------------------------------------------------------
# training


def train_model(dataset: Dataset, split: DatasetSplit, matrices: InteractionMatrices,
                segment_features: np.ndarray, hyper: Hyperparams,
                flags: AblationFlags | None = None, seed: int = 0, dtype: str = "f32",
                log_fn=None) -> tuple:
    """Train with Adam over shuffled positive pairs; early stop on val NDCG@10.

    Returns (model, history) where history has one entry per epoch with the
    loss components and, when validation data exists, the validation NDCG.
    """
    from .evaluation import ndcg_for_validation  # local import to avoid a cycle

    model = RecModel(dataset, split, matrices, segment_features, hyper, flags,
                     seed=seed, dtype=dtype)
    params = model.params()
    adam = ad.AdamState(params)
    rng = np.random.default_rng([seed, 0xC0DE])

    pos_pairs = np.stack([matrices.Y.row_idx, matrices.Y.col_idx], axis=1)
    if len(pos_pairs) == 0:
        raise ValueError("training split has no positive interactions")

    val_pairs = [(r.user.index, r.target.index) for r in split.val if r.behavior == "commit"]
    history = []
    best_ndcg, best_params, patience_left = -1.0, None, hyper.patience
    skipped_users = set()

    for epoch in range(hyper.epochs):
        order = rng.permutation(len(pos_pairs))
        epoch_parts, n_batches = {}, 0
        for start in range(0, len(order), hyper.batch_size):
            batch = pos_pairs[order[start:start + hyper.batch_size]]
            users, pos = batch[:, 0], batch[:, 1]
            try:
                neg = model._negatives_for(users, rng)
            except ResampleError:
                keep = np.array([len(model._user_pos[int(u)]) < dataset.n_files for u in users])
                skipped_users.update(users[~keep].tolist())
                users, pos = users[keep], pos[keep]
                if len(users) == 0:
                    continue
                neg = model._negatives_for(users, rng)
            ad.zero_grads(params)
            with ad.Tape() as tape:
                loss, parts = model.batch_loss(users, pos, neg, rng)
            ad.backward(tape, loss)
            grads = [p.grad_or_zero() for p in params]
            ad.adam_step(params, grads, adam, hyper.lr)
            model.params_version += 1
            for k, v in parts.items():
                epoch_parts[k] = epoch_parts.get(k, 0.0) + v
            n_batches += 1

        entry = {"epoch": epoch}
        entry.update({k: v / max(n_batches, 1) for k, v in epoch_parts.items()})

        if val_pairs and (epoch % hyper.eval_every == 0 or epoch == hyper.epochs - 1):
            ndcg = ndcg_for_validation(model, val_pairs, k=10)
            entry["val_ndcg10"] = ndcg
            if ndcg > best_ndcg + 1e-9:
                best_ndcg = ndcg
                best_params = [p.data.copy() for p in params]
                patience_left = hyper.patience
            else:
                patience_left -= 1
                if patience_left <= 0:
                    history.append(entry)
                    if log_fn:
                        log_fn(entry)
                    break
        history.append(entry)
        if log_fn:
            log_fn(entry)

    if best_params is not None:
        for p, data in zip(params, best_params):
            p.data = data
        model.params_version += 1
    if skipped_users:
        history.append({"epoch": -1, "skipped_users": sorted(skipped_users)})
    return model, history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, model: RecModel):
    """Versioned binary: header JSON + raw parameter buffers, deterministic bytes."""
    params = model.params()
    header = {
        "version": CHECKPOINT_VERSION,
        "hyper": asdict(model.hyper),
        "flags": asdict(model.flags),
        "seed": model.seed,
        "dtype": model.dtype,
        "d_in": model.d_in,
        "mapping_hash": model.dataset.mapping_hash(),
        "variant": model.flags.variant_tag(),
        "tensors": [{"name": p.name or f"p{i}", "shape": list(p.data.shape)}
                    for i, p in enumerate(params)],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4" if model.dtype == "f32" else "<f8").tobytes())


def _read_header(path: str) -> tuple:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(hlen).decode("utf-8")), 8 + hlen


def read_checkpoint_header(path: str) -> dict:
    return _read_header(path)[0]


def load_checkpoint(path: str, dataset: Dataset, split: DatasetSplit,
                    matrices: InteractionMatrices, segment_features: np.ndarray) -> RecModel:
    """Rebuild the model for a dataset and restore trained parameters.

    Refuses to load when the dataset's id-mapping hash differs from the one
    recorded at save time.
    """
    header, payload_off = _read_header(path)
    if header["mapping_hash"] != dataset.mapping_hash():
        raise DataIntegrityError(f"{path}: checkpoint was trained against a different "
                                 f"dataset (id-mapping hash mismatch)")
    hyper = Hyperparams(**{k: tuple(v) if k == "behaviors" else v
                           for k, v in header["hyper"].items()})
    flags = AblationFlags(**header["flags"])
    model = RecModel(dataset, split, matrices, segment_features, hyper, flags,
                     seed=header["seed"], dtype=header["dtype"])
    params = model.params()
    np_dtype = "<f4" if header["dtype"] == "f32" else "<f8"
    item = np.dtype(np_dtype).itemsize
    with open(path, "rb") as fh:
        fh.seek(payload_off)
        for p, meta in zip(params, header["tensors"]):
            shape = tuple(meta["shape"])
            if tuple(p.data.shape) != shape:
                raise ValueError(f"{path}: tensor {meta['name']} shape {shape} does not match "
                                 f"rebuilt model {p.data.shape}")
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * item)
            if len(buf) != count * item:
                raise ValueError(f"{path}: truncated checkpoint")
            p.data = np.frombuffer(buf, dtype=np_dtype).reshape(shape).astype(p.data.dtype)
    return model


def checkpoint_hash(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()

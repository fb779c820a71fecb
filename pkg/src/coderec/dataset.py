"""Canonical data model: entity tables, interaction records, temporal splits,
and sparse interaction matrices.

On-disk layout of a dataset directory (one JSON object per line):
    users.jsonl         {"login": str, "id": str}
    repos.jsonl         {"id": str, "owner": str, "created_at": int,
                         "top_languages": [str], "topics": [str]}
    interactions.jsonl  {"user": str, "target": str, "kind": "file"|"repo",
                         "behavior": "commit"|"star"|"watch"|"fork", "ts": int}
    trees/<repo>.jsonl  {"id": str, "kind": "file"|"dir"|"root", "name": str,
                         "parent": str|null}
    code.jsonl          {"id": str, "text": str}   (optional, source text)
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

BEHAVIORS = ("commit", "star", "watch", "fork")
PROJECT_BEHAVIORS = ("star", "watch", "fork")


class DataFormatError(Exception):
    """Malformed or missing dataset file."""


class DataIntegrityError(Exception):
    """Referential integrity violation, with file/line context."""


class EntityId(NamedTuple):
    kind: str  # user | file | directory | repo
    index: int


class InteractionRecord(NamedTuple):
    user: EntityId
    target: EntityId
    behavior: str
    ts: int


@dataclass
class Dataset:
    """Immutable after load; dense indices are assigned by first appearance."""

    users: list  # raw user ids, position = dense index
    user_logins: list
    repos: list  # raw repo ids
    repo_owners: list
    repo_created: list
    repo_languages: list
    repo_topics: list
    files: list  # raw file ids
    file_names: list
    file_repo: np.ndarray  # dense repo index per file
    file_parent: list  # ("dir", idx) | ("root", repo_idx)
    dirs: list  # raw directory ids
    dir_names: list
    dir_repo: np.ndarray
    dir_parent: list
    records: list  # InteractionRecord
    code: dict = field(default_factory=dict)  # raw file id -> source text

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_files(self):
        return len(self.files)

    @property
    def n_repos(self):
        return len(self.repos)

    @property
    def n_dirs(self):
        return len(self.dirs)

    def id_maps(self):
        return {
            "user": {raw: i for i, raw in enumerate(self.users)},
            "file": {raw: i for i, raw in enumerate(self.files)},
            "directory": {raw: i for i, raw in enumerate(self.dirs)},
            "repo": {raw: i for i, raw in enumerate(self.repos)},
        }

    def mapping_hash(self) -> str:
        blob = json.dumps(self.id_maps(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def repo_files(self, repo_index: int) -> np.ndarray:
        return np.nonzero(self.file_repo == repo_index)[0]


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    boundaries: tuple  # (t1, t2)

    def all_records(self):
        return self.train + self.val + self.test


class SparseBinary:
    """Deduplicated binary incidence matrix stored as sorted COO pairs."""

    def __init__(self, rows: int, cols: int, pairs):
        self.rows, self.cols = int(rows), int(cols)
        uniq = sorted(set(pairs))
        if uniq:
            arr = np.asarray(uniq, dtype=np.int64)
            self.row_idx, self.col_idx = arr[:, 0], arr[:, 1]
            if self.row_idx.max() >= rows or self.col_idx.max() >= cols:
                raise ValueError("index out of bounds for matrix shape")
        else:
            self.row_idx = np.zeros(0, dtype=np.int64)
            self.col_idx = np.zeros(0, dtype=np.int64)

    @property
    def nnz(self):
        return len(self.row_idx)

    def density(self) -> float:
        total = self.rows * self.cols
        return self.nnz / total if total else 0.0

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=np.float64)
        out[self.row_idx, self.col_idx] = 1.0
        return out

    def rows_of(self, col: int) -> np.ndarray:
        return self.row_idx[self.col_idx == col]

    def cols_of(self, row: int) -> np.ndarray:
        return self.col_idx[self.row_idx == row]


@dataclass
class InteractionMatrices:
    Y: SparseBinary  # users x files, train commits
    S: dict  # behavior -> SparseBinary users x repos


# ---------------------------------------------------------------------------
# loading


def _read_jsonl(path, required):
    if not os.path.isfile(path):
        raise DataFormatError(f"missing dataset file: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            for key in required:
                if key not in obj:
                    raise DataFormatError(f"{path}:{lineno}: missing key {key!r}")
            rows.append((lineno, obj))
    return rows


def load_dataset(path: str, persist_id_map: bool = True) -> Dataset:
    """Load a dataset directory, re-indexing raw ids to dense integers.

    Dense ids follow first-appearance order: users.jsonl order for users,
    repos.jsonl order for repos, and tree-file order (repos scanned in
    repos.jsonl order) for files and directories.
    """
    users_rows = _read_jsonl(os.path.join(path, "users.jsonl"), ("login", "id"))
    repos_rows = _read_jsonl(os.path.join(path, "repos.jsonl"), ("id", "owner", "created_at"))

    users, user_logins, user_map = [], [], {}
    for lineno, obj in users_rows:
        raw = str(obj["id"])
        if raw in user_map:
            raise DataIntegrityError(f"users.jsonl:{lineno}: duplicate user id {raw!r}")
        user_map[raw] = len(users)
        users.append(raw)
        user_logins.append(str(obj["login"]))

    repos, repo_owners, repo_created, repo_langs, repo_topics, repo_map = [], [], [], [], [], {}
    for lineno, obj in repos_rows:
        raw = str(obj["id"])
        if raw in repo_map:
            raise DataIntegrityError(f"repos.jsonl:{lineno}: duplicate repo id {raw!r}")
        repo_map[raw] = len(repos)
        repos.append(raw)
        repo_owners.append(str(obj["owner"]))
        repo_created.append(int(obj["created_at"]))
        repo_langs.append([str(x) for x in obj.get("top_languages", [])][:5])
        repo_topics.append([str(x) for x in obj.get("topics", [])])

    files, file_names, file_repo, file_parent, file_map = [], [], [], [], {}
    dirs, dir_names, dir_repo, dir_parent, dir_map = [], [], [], [], {}
    for repo_raw in repos:
        k = repo_map[repo_raw]
        tree_path = os.path.join(path, "trees", f"{repo_raw}.jsonl")
        rows = _read_jsonl(tree_path, ("id", "kind", "name"))
        nodes = {}
        root_raw = None
        for lineno, obj in rows:
            raw, kind = str(obj["id"]), obj["kind"]
            if raw in nodes:
                raise DataIntegrityError(f"{tree_path}:{lineno}: duplicate node id {raw!r}")
            if kind not in ("file", "dir", "root"):
                raise DataFormatError(f"{tree_path}:{lineno}: unknown node kind {kind!r}")
            nodes[raw] = (lineno, kind, str(obj["name"]), obj.get("parent"))
            if kind == "root":
                if root_raw is not None:
                    raise DataIntegrityError(f"{tree_path}:{lineno}: multiple root nodes")
                root_raw = raw
        if root_raw is None:
            raise DataIntegrityError(f"{tree_path}: tree has no root node")
        for raw, (lineno, kind, name, parent) in nodes.items():
            if kind == "root":
                if parent is not None:
                    raise DataIntegrityError(f"{tree_path}:{lineno}: root node has a parent")
                continue
            if parent is None or str(parent) not in nodes:
                raise DataIntegrityError(f"{tree_path}:{lineno}: node {raw!r} parent {parent!r} not in tree")
            if nodes[str(parent)][1] == "file":
                raise DataIntegrityError(f"{tree_path}:{lineno}: parent of {raw!r} is a file")
            if kind == "dir":
                if raw in dir_map:
                    raise DataIntegrityError(f"{tree_path}:{lineno}: directory id {raw!r} reused across repos")
                dir_map[raw] = len(dirs)
                dirs.append(raw)
                dir_names.append(name)
                dir_repo.append(k)
                dir_parent.append(None)  # resolved below
        for raw, (lineno, kind, name, parent) in nodes.items():
            parent_raw = str(parent) if parent is not None else None
            if kind == "file":
                if raw in file_map:
                    raise DataIntegrityError(f"{tree_path}:{lineno}: file id {raw!r} reused across repos")
                ref = ("root", k) if nodes[parent_raw][1] == "root" else ("dir", dir_map[parent_raw])
                file_map[raw] = len(files)
                files.append(raw)
                file_names.append(name)
                file_repo.append(k)
                file_parent.append(ref)
            elif kind == "dir":
                ref = ("root", k) if nodes[parent_raw][1] == "root" else ("dir", dir_map[parent_raw])
                dir_parent[dir_map[raw]] = ref

    inter_path = os.path.join(path, "interactions.jsonl")
    records = []
    for lineno, obj in _read_jsonl(inter_path, ("user", "target", "kind", "behavior", "ts")):
        behavior = obj["behavior"]
        if behavior not in BEHAVIORS:
            raise DataFormatError(f"{inter_path}:{lineno}: unknown behavior {behavior!r}")
        ts = int(obj["ts"])
        if ts <= 0:
            raise DataIntegrityError(f"{inter_path}:{lineno}: non-positive timestamp {ts}")
        uraw, traw, kind = str(obj["user"]), str(obj["target"]), obj["kind"]
        if uraw not in user_map:
            raise DataIntegrityError(f"{inter_path}:{lineno}: unknown user {uraw!r}")
        if behavior == "commit":
            if kind != "file":
                raise DataIntegrityError(f"{inter_path}:{lineno}: commit must target a file, got {kind!r}")
            if traw not in file_map:
                raise DataIntegrityError(f"{inter_path}:{lineno}: unknown file {traw!r}")
            target = EntityId("file", file_map[traw])
        else:
            if kind != "repo":
                raise DataIntegrityError(f"{inter_path}:{lineno}: {behavior} must target a repo, got {kind!r}")
            if traw not in repo_map:
                raise DataIntegrityError(f"{inter_path}:{lineno}: unknown repo {traw!r}")
            target = EntityId("repo", repo_map[traw])
        records.append(InteractionRecord(EntityId("user", user_map[uraw]), target, behavior, ts))

    code = {}
    code_path = os.path.join(path, "code.jsonl")
    if os.path.isfile(code_path):
        for lineno, obj in _read_jsonl(code_path, ("id", "text")):
            raw = str(obj["id"])
            if raw not in file_map:
                raise DataIntegrityError(f"{code_path}:{lineno}: unknown file {raw!r}")
            code[raw] = obj["text"]

    ds = Dataset(
        users=users, user_logins=user_logins,
        repos=repos, repo_owners=repo_owners, repo_created=repo_created,
        repo_languages=repo_langs, repo_topics=repo_topics,
        files=files, file_names=file_names,
        file_repo=np.asarray(file_repo, dtype=np.int64), file_parent=file_parent,
        dirs=dirs, dir_names=dir_names,
        dir_repo=np.asarray(dir_repo, dtype=np.int64), dir_parent=dir_parent,
        records=records, code=code,
    )
    if persist_id_map:
        try:
            with open(os.path.join(path, "id_map.json"), "w", encoding="utf-8") as fh:
                json.dump(ds.id_maps(), fh, sort_keys=True, indent=1)
        except OSError:
            pass  # read-only dataset dirs are fine; the map is derivable
    return ds


# ---------------------------------------------------------------------------
# splitting and matrices


def split_by_time(records, t1: int, t2: int) -> DatasetSplit:
    """Half-open temporal partition: train [0,t1), val [t1,t2), test [t2,inf).

    Users lacking a train commit or a test commit are dropped from all splits
    together with their project-level records.
    """
    if t1 >= t2:
        raise ValueError(f"t1 must be < t2, got {t1} >= {t2}")
    train = [r for r in records if r.ts < t1]
    val = [r for r in records if t1 <= r.ts < t2]
    test = [r for r in records if r.ts >= t2]

    train_committers = {r.user.index for r in train if r.behavior == "commit"}
    test_committers = {r.user.index for r in test if r.behavior == "commit"}
    keep = train_committers & test_committers
    return DatasetSplit(
        train=[r for r in train if r.user.index in keep],
        val=[r for r in val if r.user.index in keep],
        test=[r for r in test if r.user.index in keep],
        boundaries=(t1, t2),
    )


def build_interaction_matrices(split: DatasetSplit, n_users: int, n_files: int,
                               n_repos: int) -> InteractionMatrices:
    """Binary Y from train commits; per-behavior S_t from train project records."""
    y_pairs = [(r.user.index, r.target.index) for r in split.train if r.behavior == "commit"]
    s = {}
    for b in PROJECT_BEHAVIORS:
        pairs = [(r.user.index, r.target.index) for r in split.train if r.behavior == b]
        s[b] = SparseBinary(n_users, n_repos, pairs)
    return InteractionMatrices(Y=SparseBinary(n_users, n_files, y_pairs), S=s)


# ---------------------------------------------------------------------------
# writing (used by the miner, the synthetic generator, and tests)


def dump_jsonl(path, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def write_dataset_dir(path, users, repos, trees, interactions, code=None):
    """Write the jsonl layout. `trees` maps repo raw id -> list of node dicts."""
    dump_jsonl(os.path.join(path, "users.jsonl"), users)
    dump_jsonl(os.path.join(path, "repos.jsonl"), repos)
    dump_jsonl(os.path.join(path, "interactions.jsonl"), interactions)
    for repo_raw, nodes in trees.items():
        dump_jsonl(os.path.join(path, "trees", f"{repo_raw}.jsonl"), nodes)
    if code:
        dump_jsonl(os.path.join(path, "code.jsonl"),
                   [{"id": k, "text": v} for k, v in code.items()])

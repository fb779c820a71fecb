"""Dataset construction from a code-hosting REST API.

All responses pass through a content-addressed cache keyed by
(endpoint, params, page), so a finished crawl replays byte-identically with
zero network calls. Emits the dataset directory layout of module dataset.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
import requests

from .dataset import dump_jsonl

PER_PAGE = 100
MIN_HISTORY_DAYS = 90


class MinerConfigError(Exception):
    """Fatal configuration problem (bad credentials, unusable base URL)."""


class RateLimitError(Exception):
    """Rate limit persisted beyond the bounded backoff budget."""


@dataclass
class RepoFilter:
    min_stars: int = 250
    min_contributors: int = 3
    min_history_months: int = 3
    topics: list = field(default_factory=list)
    sample_size: int = 300

    def __post_init__(self):
        for name in ("min_stars", "min_contributors", "min_history_months", "sample_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


class CrawlCache:
    """Raw API responses keyed by request identity; replay is byte-identical."""

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)

    def _path(self, endpoint: str, params: dict, page: int) -> str:
        ident = json.dumps({"endpoint": endpoint, "params": params, "page": page},
                           sort_keys=True)
        digest = hashlib.sha256(ident.encode("utf-8")).hexdigest()
        return os.path.join(self.root, digest[:2], digest[2:] + ".json")

    def get(self, endpoint: str, params: dict, page: int):
        path = self._path(endpoint, params, page)
        if not os.path.isfile(path):
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)["body"]

    def put(self, endpoint: str, params: dict, page: int, body):
        path = self._path(endpoint, params, page)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        blob = json.dumps({"endpoint": endpoint, "params": params, "page": page,
                           "body": body}, sort_keys=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(blob)


class ApiClient:
    """Paginated GET with bounded exponential backoff on rate limits."""

    def __init__(self, base_url: str, cache: CrawlCache, token: str | None = None,
                 max_retries: int = 6, backoff_base: float = 1.0, session=None):
        self.base_url = base_url.rstrip("/")
        self.cache = cache
        self.token = token
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.session = session or requests.Session()
        self.network_calls = 0

    def get_json(self, endpoint: str, params: dict | None = None, page: int = 1):
        params = dict(params or {})
        cached = self.cache.get(endpoint, params, page)
        if cached is not None:
            return cached
        url = f"{self.base_url}/{endpoint.lstrip('/')}"
        headers = {"Accept": "application/vnd.github.star+json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        query = dict(params, per_page=PER_PAGE, page=page)
        for attempt in range(self.max_retries + 1):
            self.network_calls += 1
            resp = self.session.get(url, params=query, headers=headers, timeout=30)
            if resp.status_code in (401,):
                raise MinerConfigError(f"authentication failed against {self.base_url} "
                                       f"({resp.status_code})")
            if resp.status_code in (403, 429):
                if attempt == self.max_retries:
                    raise RateLimitError(f"rate limited on {endpoint} after "
                                         f"{self.max_retries} retries")
                time.sleep(self.backoff_base * (2 ** attempt))
                continue
            resp.raise_for_status()
            body = resp.json()
            self.cache.put(endpoint, params, page, body)
            return body
        raise RateLimitError(f"unreachable: {endpoint}")

    def get_paginated(self, endpoint: str, params: dict | None = None,
                      items_key: str | None = None) -> list:
        """Follow pages until a short page or an empty one."""
        out = []
        page = 1
        while True:
            body = self.get_json(endpoint, params, page)
            items = body[items_key] if items_key else body
            if not isinstance(items, list):
                raise ValueError(f"{endpoint} page {page}: expected a list")
            out.extend(items)
            if len(items) < PER_PAGE:
                return out
            page += 1


def _iso_to_unix(stamp: str) -> int:
    return int(datetime.fromisoformat(stamp.replace("Z", "+00:00"))
               .astimezone(timezone.utc).timestamp())


def _is_bot(login: str) -> bool:
    return login.endswith("[bot]")


# ---------------------------------------------------------------------------
# discovery


def discover_repos(client: ApiClient, flt: RepoFilter, seed: int) -> list:
    """Candidates matching every threshold, then a seeded stratified sample.

    Strata are the cross of star terciles and file-count terciles, sampled
    proportionally (largest remainder), deterministic under a fixed seed and
    warm cache.
    """
    if not flt.topics:
        raise ValueError("topic list is empty")
    candidates = {}
    for topic in flt.topics:
        q = f"topic:{topic} stars:>={flt.min_stars}"
        items = client.get_paginated("search/repositories", {"q": q}, items_key="items")
        for item in items:
            candidates[str(item["id"])] = item

    kept = []
    for repo_id, item in sorted(candidates.items()):
        if item.get("stargazers_count", 0) < flt.min_stars:
            continue
        full = item["full_name"]
        contributors = client.get_paginated(f"repos/{full}/contributors")
        humans = [c for c in contributors if not _is_bot(c.get("login", ""))]
        if len(humans) < flt.min_contributors:
            continue
        commits = client.get_paginated(f"repos/{full}/commits")
        stamps = [_iso_to_unix(c["commit"]["author"]["date"]) for c in commits
                  if c.get("commit", {}).get("author", {}).get("date")]
        if not stamps:
            continue
        span_days = (max(stamps) - min(stamps)) / 86400.0
        if span_days < flt.min_history_months * 30:
            continue
        tree = client.get_json(f"repos/{full}/git/trees/HEAD", {"recursive": "1"})
        n_files = sum(1 for node in tree.get("tree", []) if node.get("type") == "blob")
        kept.append({"id": repo_id, "item": item, "n_files": n_files,
                     "stars": item.get("stargazers_count", 0)})

    if len(kept) <= flt.sample_size:
        return [k["item"] for k in kept]
    return _stratified_sample(kept, flt.sample_size, seed)


def _stratified_sample(kept: list, size: int, seed: int) -> list:
    stars = np.array([k["stars"] for k in kept], dtype=np.float64)
    files = np.array([k["n_files"] for k in kept], dtype=np.float64)

    def tercile(vals):
        lo, hi = np.quantile(vals, [1 / 3, 2 / 3])
        return np.where(vals <= lo, 0, np.where(vals <= hi, 1, 2))

    strata = tercile(stars) * 3 + tercile(files)
    rng = np.random.default_rng(seed)
    buckets = {}
    for idx, s in enumerate(strata):
        buckets.setdefault(int(s), []).append(idx)
    quotas = {s: size * len(members) / len(kept) for s, members in buckets.items()}
    alloc = {s: int(q) for s, q in quotas.items()}
    remainder = size - sum(alloc.values())
    for s in sorted(quotas, key=lambda s: quotas[s] - alloc[s], reverse=True)[:remainder]:
        alloc[s] += 1
    picked = []
    for s in sorted(buckets):
        members = sorted(buckets[s], key=lambda i: kept[i]["id"])
        take = min(alloc.get(s, 0), len(members))
        picked.extend(rng.choice(members, size=take, replace=False).tolist())
    return [kept[i]["item"] for i in sorted(picked)]


# ---------------------------------------------------------------------------
# harvesting


def harvest_repo(client: ApiClient, item: dict) -> dict:
    """Tree nodes, per-file commit records, and star/watch/fork events for one
    repo, in the dataset module's shapes. Returns a warnings list for files
    touched by commits but absent from the current tree."""
    full = item["full_name"]
    repo_id = str(item["id"])

    tree_body = client.get_json(f"repos/{full}/git/trees/HEAD", {"recursive": "1"})
    root_id = f"{repo_id}:root"
    nodes = {root_id: {"id": root_id, "kind": "root", "name": full.split("/")[-1],
                       "parent": None}}
    known_paths = {"": root_id}

    def ensure_dir(path: str) -> str:
        if path in known_paths:
            return known_paths[path]
        parent_path = path.rsplit("/", 1)[0] if "/" in path else ""
        parent_id = ensure_dir(parent_path)
        node_id = f"{repo_id}:{path}"
        nodes[node_id] = {"id": node_id, "kind": "dir",
                          "name": path.rsplit("/", 1)[-1], "parent": parent_id}
        known_paths[path] = node_id
        return node_id

    file_ids = {}
    for entry in tree_body.get("tree", []):
        path, kind = entry.get("path", ""), entry.get("type")
        if not path:
            continue
        if kind == "tree":
            ensure_dir(path)
        elif kind == "blob":
            parent_path = path.rsplit("/", 1)[0] if "/" in path else ""
            parent_id = ensure_dir(parent_path)
            node_id = f"{repo_id}:{path}"
            nodes[node_id] = {"id": node_id, "kind": "file",
                              "name": path.rsplit("/", 1)[-1], "parent": parent_id}
            file_ids[path] = node_id

    interactions, users, warnings = [], set(), []
    commits = client.get_paginated(f"repos/{full}/commits")
    for c in commits:
        author = (c.get("author") or {}).get("login")
        date = (c.get("commit", {}).get("author") or {}).get("date")
        if not author or not date or _is_bot(author):
            continue
        ts = _iso_to_unix(date)
        files = c.get("files")
        if files is None:
            detail = client.get_json(f"repos/{full}/commits/{c['sha']}")
            files = detail.get("files", [])
        for f in files:
            path = f.get("filename", "")
            if path not in file_ids:
                warnings.append(f"{full}: commit {c.get('sha', '?')[:8]} touches "
                                f"{path!r} not in HEAD tree, skipped")
                continue
            users.add(author)
            interactions.append({"user": author, "target": file_ids[path],
                                 "kind": "file", "behavior": "commit", "ts": ts})

    for star in client.get_paginated(f"repos/{full}/stargazers"):
        login = (star.get("user") or star).get("login")
        stamp = star.get("starred_at")
        if not login or not stamp or _is_bot(login):
            continue
        users.add(login)
        interactions.append({"user": login, "target": repo_id, "kind": "repo",
                             "behavior": "star", "ts": _iso_to_unix(stamp)})

    for sub in client.get_paginated(f"repos/{full}/subscribers"):
        login = sub.get("login")
        if not login or _is_bot(login):
            continue
        stamp = sub.get("subscribed_at")
        ts = _iso_to_unix(stamp) if stamp else int(item.get("created_at_unix", 0)) or \
            _iso_to_unix(item["created_at"])
        users.add(login)
        interactions.append({"user": login, "target": repo_id, "kind": "repo",
                             "behavior": "watch", "ts": ts})

    for fork in client.get_paginated(f"repos/{full}/forks"):
        login = (fork.get("owner") or {}).get("login")
        stamp = fork.get("created_at")
        if not login or not stamp or _is_bot(login):
            continue
        users.add(login)
        interactions.append({"user": login, "target": repo_id, "kind": "repo",
                             "behavior": "fork", "ts": _iso_to_unix(stamp)})

    languages = client.get_json(f"repos/{full}/languages")
    top_langs = [k for k, _ in sorted(languages.items(), key=lambda kv: (-kv[1], kv[0]))[:5]]

    repo_record = {
        "id": repo_id,
        "owner": item["owner"]["login"] if isinstance(item.get("owner"), dict)
        else str(item.get("owner", "")),
        "created_at": _iso_to_unix(item["created_at"]),
        "top_languages": top_langs,
        "topics": item.get("topics", []),
    }
    return {"repo": repo_record, "tree": sorted(nodes.values(), key=lambda n: n["id"]),
            "interactions": interactions, "users": users, "warnings": warnings}


def mine(client: ApiClient, flt: RepoFilter, seed: int, out_dir: str) -> dict:
    """discover + harvest + emit. Idempotent under a warm cache."""
    repos = discover_repos(client, flt, seed)
    all_users, repo_rows, trees, interactions, warnings = set(), [], {}, [], []
    for item in repos:
        result = harvest_repo(client, item)
        repo_rows.append(result["repo"])
        trees[result["repo"]["id"]] = result["tree"]
        interactions.extend(result["interactions"])
        all_users |= result["users"]
        warnings.extend(result["warnings"])

    user_rows = [{"login": u, "id": u} for u in sorted(all_users)]
    interactions.sort(key=lambda r: (r["ts"], r["user"], r["target"], r["behavior"]))
    os.makedirs(out_dir, exist_ok=True)
    dump_jsonl(os.path.join(out_dir, "users.jsonl"), user_rows)
    dump_jsonl(os.path.join(out_dir, "repos.jsonl"), repo_rows)
    dump_jsonl(os.path.join(out_dir, "interactions.jsonl"), interactions)
    for repo_id, nodes in trees.items():
        dump_jsonl(os.path.join(out_dir, "trees", f"{repo_id}.jsonl"), nodes)
    ledger_path = os.path.join(out_dir, "warnings.log")
    if warnings:
        with open(ledger_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(warnings) + "\n")
    return {"n_repos": len(repo_rows), "n_users": len(user_rows),
            "n_interactions": len(interactions), "warnings": len(warnings),
            "warning_ledger": ledger_path}

"""Seeded synthetic datasets with planted user-repo block structure.

Each user group owns a pair of repositories: a "home" repo that receives the
group's training commits and a "sister" repo that the group only stars and
watches during training but commits to in the test window. Ranking the sister
repo's files correctly therefore requires the project-level behavior signal,
while unseen files in the home repo reward collaborative propagation.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass

import numpy as np

from .dataset import write_dataset_dir

T1 = 1550000000
T2 = 1602000000

_GROUP_WORDS = [
    ["tensor", "gradient", "layer", "optimizer", "epoch", "batch"],
    ["query", "index", "shard", "transaction", "schema", "cursor"],
    ["router", "component", "render", "state", "props", "hook"],
    ["socket", "packet", "buffer", "stream", "protocol", "frame"],
    ["lexer", "parser", "token", "grammar", "symbol", "scope"],
    ["kernel", "thread", "mutex", "scheduler", "interrupt", "page"],
    ["shader", "vertex", "mesh", "texture", "camera", "light"],
    ["cipher", "digest", "nonce", "keypair", "signer", "vault"],
]

_LANGS = ["Python", "JavaScript", "Go", "Rust", "C", "Java"]


@dataclass
class SynthConfig:
    n_groups: int = 5
    users_per_group: int = 10
    files_per_repo: int = 20
    train_commits_low: int = 3
    train_commits_high: int = 6
    test_commits_home: int = 1
    test_commits_sister: int = 2
    cold_users_per_group: int = 1  # users capped at <=2 train commits
    noise_rate: float = 0.05
    star_home_prob: float = 1.0
    # optionally a slice of each group commits a little into the sister repo
    # during training; at 0 the sister repo is reachable only through the
    # star/watch graph, which is what the planted experiments measure
    sister_seeder_fraction: float = 0.0
    sister_seed_commits: int = 2
    # optional third repo per group that evaluated users never touch in
    # training; half the group commits there so the preference is reachable
    # through collaborative propagation (cross-project protocol fodder)
    twin_repos: bool = False
    twin_test_commits: int = 2
    twin_committer_fraction: float = 0.5
    seed: int = 0

    @property
    def repos_per_group(self):
        return 3 if self.twin_repos else 2

    @property
    def n_repos(self):
        return self.repos_per_group * self.n_groups

    @property
    def n_users(self):
        return self.n_groups * self.users_per_group

    @property
    def n_files(self):
        return self.n_repos * self.files_per_repo


def generate_dataset(out_dir: str, cfg: SynthConfig) -> dict:
    """Write a planted dataset directory; returns a summary of what was planted."""
    rng = np.random.default_rng(cfg.seed)

    users = [{"login": f"dev{u}", "id": f"u{u}"} for u in range(cfg.n_users)]
    repos, trees, code = [], {}, {}
    for r in range(cfg.n_repos):
        group = r // cfg.repos_per_group
        words = _GROUP_WORDS[group % len(_GROUP_WORDS)]
        repos.append({
            "id": f"r{r}",
            "owner": f"org{group}",
            "created_at": int(1400000000 + 1000000 * r),
            "top_languages": [_LANGS[group % len(_LANGS)], _LANGS[(group + 1) % len(_LANGS)]],
            "topics": [words[0], words[1]],
        })
        nodes = [{"id": f"r{r}:root", "kind": "root", "name": f"repo{r}", "parent": None},
                 {"id": f"r{r}:src", "kind": "dir", "name": f"{words[0]}_core", "parent": f"r{r}:root"},
                 {"id": f"r{r}:test", "kind": "dir", "name": f"test_{words[1]}", "parent": f"r{r}:root"}]
        for i in range(cfg.files_per_repo):
            fid = f"r{r}:f{i}"
            parent = f"r{r}:src" if i % 2 == 0 else f"r{r}:test"
            nodes.append({"id": fid, "kind": "file", "name": f"{words[i % len(words)]}_{i}.py",
                          "parent": parent})
            body = ["def", "main", "(", ")", ":", "return"]
            body += list(rng.choice(words, size=12))
            body += [f"v{r}_{i}", f"helper_{i % 4}"]
            code[fid] = " ".join(body)
        trees[f"r{r}"] = nodes

    def repo_file(r, i):
        return f"r{r}:f{i}"

    interactions = []

    def commit(u, fid, ts):
        interactions.append({"user": f"u{u}", "target": fid, "kind": "file",
                             "behavior": "commit", "ts": int(ts)})

    def project(u, r, behavior, ts):
        interactions.append({"user": f"u{u}", "target": f"r{r}", "kind": "repo",
                             "behavior": behavior, "ts": int(ts)})

    train_ts = lambda: rng.integers(T1 - 10_000_000, T1)
    val_ts = lambda: rng.integers(T1, T2)
    test_ts = lambda: rng.integers(T2, T2 + 10_000_000)

    planted = {"group_of_user": {}, "home_repo": {}, "sister_repo": {},
               "twin_repo": {}, "twin_committers": []}
    for g in range(cfg.n_groups):
        home = cfg.repos_per_group * g
        sister = home + 1
        twin = home + 2 if cfg.twin_repos else None
        group_users = range(g * cfg.users_per_group, (g + 1) * cfg.users_per_group)
        # popular core files attract most of the group's commits
        core = rng.choice(cfg.files_per_repo, size=max(cfg.files_per_repo // 2, 1), replace=False)
        sister_core = rng.choice(cfg.files_per_repo,
                                 size=max(cfg.files_per_repo // 2, 1), replace=False)
        n_seeders = int(round(cfg.sister_seeder_fraction * cfg.users_per_group))
        for rank, u in enumerate(group_users):
            planted["group_of_user"][u] = g
            planted["home_repo"][u] = home
            planted["sister_repo"][u] = sister
            cold = rank < cfg.cold_users_per_group
            n_train = 1 if cold else int(rng.integers(cfg.train_commits_low,
                                                      cfg.train_commits_high + 1))
            touched = rng.choice(core, size=min(n_train, len(core)), replace=False)
            for i in touched:
                commit(u, repo_file(home, int(i)), train_ts())
            # validation commits mirror the test distribution so early
            # stopping selects for the same generalization the test measures
            commit(u, repo_file(home, int(rng.integers(cfg.files_per_repo))), val_ts())
            if cfg.test_commits_sister > 0:
                commit(u, repo_file(sister, int(rng.choice(sister_core))), val_ts())
            # test commits in the home repo come from the co-committed core so
            # collaborative signal alone can find them; sister-repo test
            # commits are only reachable through the project-level behaviors
            home_pool = np.setdiff1d(core, touched)
            if len(home_pool) == 0:
                home_pool = np.setdiff1d(np.arange(cfg.files_per_repo), touched)
            for i in rng.choice(home_pool, size=min(cfg.test_commits_home, len(home_pool)),
                                replace=False):
                commit(u, repo_file(home, int(i)), test_ts())
            # the top ranks of each group seed the sister repo during training
            seeded = set()
            if not cold and rank >= cfg.users_per_group - n_seeders:
                for i in rng.choice(sister_core, size=min(cfg.sister_seed_commits,
                                                          len(sister_core)), replace=False):
                    seeded.add(int(i))
                    commit(u, repo_file(sister, int(i)), train_ts())
            sister_pool = np.setdiff1d(sister_core, sorted(seeded))
            for i in rng.choice(sister_pool, size=min(cfg.test_commits_sister, len(sister_pool)),
                                replace=False):
                commit(u, repo_file(sister, int(i)), test_ts())
            # project-level signal: always star and watch the sister repo;
            # the home repo is starred with configurable probability
            if rng.random() < cfg.star_home_prob:
                project(u, home, "star", train_ts())
            project(u, sister, "star", train_ts())
            project(u, sister, "watch", train_ts())
            if twin is not None:
                planted["twin_repo"][u] = twin
                is_committer = rank >= cfg.users_per_group * (1 - cfg.twin_committer_fraction)
                if is_committer:
                    planted["twin_committers"].append(u)
                    for i in rng.choice(cfg.files_per_repo,
                                        size=min(3, cfg.files_per_repo), replace=False):
                        commit(u, repo_file(twin, int(i)), train_ts())
                    project(u, twin, "star", train_ts())
                else:
                    for i in rng.choice(cfg.files_per_repo, size=cfg.twin_test_commits,
                                        replace=False):
                        commit(u, repo_file(twin, int(i)), test_ts())
            if rng.random() < cfg.noise_rate:
                project(u, int(rng.integers(cfg.n_repos)), "star", train_ts())
            if rng.random() < cfg.noise_rate:
                other = int(rng.integers(cfg.n_repos))
                commit(u, repo_file(other, int(rng.integers(cfg.files_per_repo))), train_ts())

    write_dataset_dir(out_dir, users, repos, trees, interactions, code=code)
    return {
        "n_users": cfg.n_users, "n_repos": cfg.n_repos, "n_files": cfg.n_files,
        "n_interactions": len(interactions), "boundaries": (T1, T2), "planted": planted,
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description="generate a planted synthetic dataset")
    parser.add_argument("--out", required=True)
    parser.add_argument("--groups", type=int, default=5)
    parser.add_argument("--users-per-group", type=int, default=10)
    parser.add_argument("--files-per-repo", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    cfg = SynthConfig(n_groups=args.groups, users_per_group=args.users_per_group,
                      files_per_repo=args.files_per_repo, seed=args.seed)
    summary = generate_dataset(args.out, cfg)
    print(f"wrote {summary['n_interactions']} interactions for {summary['n_users']} users, "
          f"{summary['n_files']} files, {summary['n_repos']} repos to {args.out}")


if __name__ == "__main__":
    main()

"""Export per-segment code features for every file of a dataset directory.

Reads the engine's dataset layout (repos.jsonl, trees/<repo>.jsonl,
code.jsonl), encodes each file's token segments, max-pools tokens into one
row per segment, and writes the CFEA container in dataset file-id order.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .encoder import build_encoder, segment_tokens, tokenize_source
from .format import write_features


@dataclass
class ExportJob:
    dataset: str
    out_path: str
    model_id: str = "tiny"
    n_segments: int = 8
    max_tokens_per_segment: int = 128
    seed: int = 0


def _read_jsonl(path):
    rows = []
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing dataset file: {path}")
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def dataset_file_order(dataset: str) -> list:
    """File ids in the engine's dense-index order: repos.jsonl order, then
    file-node order within each tree file."""
    repo_ids = [str(r["id"]) for r in _read_jsonl(os.path.join(dataset, "repos.jsonl"))]
    file_ids = []
    for rid in repo_ids:
        tree = _read_jsonl(os.path.join(dataset, "trees", f"{rid}.jsonl"))
        file_ids.extend(str(n["id"]) for n in tree if n.get("kind") == "file")
    return file_ids


def load_code_texts(dataset: str) -> dict:
    path = os.path.join(dataset, "code.jsonl")
    if not os.path.isfile(path):
        return {}
    return {str(r["id"]): r.get("text", "") for r in _read_jsonl(path)}


def encode_segment(encoder, tokens, window: int) -> np.ndarray:
    """One feature row per segment: max over its token representations.

    Segments longer than the encoder window are split into windows, each
    encoded separately, and pooled together (window-and-pool).
    """
    if not tokens:
        return np.zeros(encoder.dim, dtype=np.float32)
    window = min(window, encoder.context_limit)
    rows = []
    for start in range(0, len(tokens), window):
        rows.append(encoder.encode_tokens(tokens[start:start + window]))
    token_rows = np.concatenate(rows, axis=0)
    return token_rows.max(axis=0)


def export_code_features(job: ExportJob) -> dict:
    """Encode every dataset file and write the feature container.

    Files without source text get zero rows and a warning. Returns a summary
    with the output shape and the warning list.
    """
    encoder = build_encoder(job.model_id, seed=job.seed)
    file_ids = dataset_file_order(job.dataset)
    texts = load_code_texts(job.dataset)
    warnings = []
    out = np.zeros((len(file_ids), job.n_segments, encoder.dim), dtype=np.float32)
    for row, fid in enumerate(file_ids):
        text = texts.get(fid)
        if text is None:
            warnings.append(f"{fid}: no source text, emitted zero rows")
            continue
        segments = segment_tokens(tokenize_source(text), job.n_segments)
        for s, seg in enumerate(segments):
            out[row, s] = encode_segment(encoder, seg, job.max_tokens_per_segment)
    os.makedirs(os.path.dirname(job.out_path) or ".", exist_ok=True)
    write_features(job.out_path, file_ids, out)
    if warnings:
        with open(job.out_path + ".warnings.log", "w", encoding="utf-8") as fh:
            fh.write("\n".join(warnings) + "\n")
    return {"n_files": len(file_ids), "n_segments": job.n_segments,
            "dim": encoder.dim, "warnings": warnings, "out": job.out_path}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="embed-bridge",
                                     description="segment-feature exporter")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="encode a dataset's files into a feature file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--segments", type=int, default=8)
    p.add_argument("--model", default="tiny",
                   help="pretrained checkpoint name, or tiny[:dim[:layers]] "
                        "for the offline encoder")
    p.add_argument("--max-tokens", type=int, default=128,
                   help="encoder window per segment")
    p.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    job = ExportJob(dataset=args.dataset, out_path=args.out, model_id=args.model,
                    n_segments=args.segments, max_tokens_per_segment=args.max_tokens,
                    seed=args.seed)
    summary = export_code_features(job)
    print(f"wrote {summary['n_files']} x {summary['n_segments']} x {summary['dim']} "
          f"features to {summary['out']}")
    if summary["warnings"]:
        print(f"{len(summary['warnings'])} warnings "
              f"(see {summary['out']}.warnings.log)", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic planted-retrieval fixtures.

Each query and its gold document share a hidden unit-norm latent
direction per modality; every layer of their feature stacks is that
latent plus independent Gaussian noise, so ground-truth ranking is
known by construction.  Distractor documents draw independent latents.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .encoder import LayerStack
from .errors import DataError
from .features import read_feature_file, write_feature_file
from .training import BatchItem


@dataclass
class FixtureSpec:
    n_train_queries: int = 64
    n_heldout_queries: int = 32
    n_docs: int = 256
    n_layers: int = 6
    text_tokens: int = 6
    vis_tokens: int = 9
    text_dim: int = 24
    vis_dim: int = 24
    noise_sigma: float = 0.1
    doc_image_fraction: float = 0.5
    seed: int = 0

    @property
    def n_queries(self) -> int:
        return self.n_train_queries + self.n_heldout_queries

    def validate(self) -> None:
        if self.n_queries < 1 or self.n_docs < self.n_queries:
            raise DataError("need n_docs >= total queries >= 1 (one gold doc per query)")
        if min(self.n_layers, self.text_tokens, self.vis_tokens,
               self.text_dim, self.vis_dim) < 1:
            raise DataError("all fixture dimensions must be >= 1")


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _planted_stack(rng, modality, latent, tokens, n_layers, sigma) -> LayerStack:
    layers = [latent[None, :] + rng.normal(0.0, sigma, size=(tokens, latent.size))
              for _ in range(n_layers)]
    return LayerStack(modality, layers)


def gen_fixtures(spec: FixtureSpec, out_dir: str) -> dict:
    """Write feature files and a manifest under ``out_dir``; returns the
    manifest.  Byte-identical across runs for a fixed spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    os.makedirs(os.path.join(out_dir, "queries"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "docs"), exist_ok=True)

    # One latent per modality per document; queries share their gold doc's.
    text_latents = [_unit(rng, spec.text_dim) for _ in range(spec.n_docs)]
    vis_latents = [_unit(rng, spec.vis_dim) for _ in range(spec.n_docs)]
    has_image = rng.random(spec.n_docs) < spec.doc_image_fraction

    queries = []
    for i in range(spec.n_queries):
        qid = f"q{i:04d}"
        text_path = os.path.join("queries", f"{qid}.text.fea")
        vis_path = os.path.join("queries", f"{qid}.vis.fea")
        write_feature_file(os.path.join(out_dir, text_path),
                           _planted_stack(rng, "text", text_latents[i], spec.text_tokens,
                                          spec.n_layers, spec.noise_sigma))
        write_feature_file(os.path.join(out_dir, vis_path),
                           _planted_stack(rng, "vision", vis_latents[i], spec.vis_tokens,
                                          spec.n_layers, spec.noise_sigma))
        queries.append({
            "id": qid,
            "split": "train" if i < spec.n_train_queries else "heldout",
            "text_features": text_path,
            "vis_features": vis_path,
            "gold_doc_id": f"d{i:04d}",
            "answer": f"answer-{i:04d}",
        })

    documents = []
    for i in range(spec.n_docs):
        did = f"d{i:04d}"
        text_path = os.path.join("docs", f"{did}.text.fea")
        write_feature_file(os.path.join(out_dir, text_path),
                           _planted_stack(rng, "text", text_latents[i], spec.text_tokens,
                                          spec.n_layers, spec.noise_sigma))
        vis_path = None
        if has_image[i]:
            vis_path = os.path.join("docs", f"{did}.vis.fea")
            write_feature_file(os.path.join(out_dir, vis_path),
                               _planted_stack(rng, "vision", vis_latents[i], spec.vis_tokens,
                                              spec.n_layers, spec.noise_sigma))
        documents.append({
            "id": did,
            "text_features": text_path,
            "vis_features": vis_path,
            "has_image": bool(has_image[i]),
            "text": f"title: topic-{i:04d} content: the reference token for "
                    f"this entry is answer-{i:04d}.",
        })

    manifest = {
        "version": 1,
        "spec": {
            "n_train_queries": spec.n_train_queries,
            "n_heldout_queries": spec.n_heldout_queries,
            "n_docs": spec.n_docs,
            "n_layers": spec.n_layers,
            "text_tokens": spec.text_tokens,
            "vis_tokens": spec.vis_tokens,
            "text_dim": spec.text_dim,
            "vis_dim": spec.vis_dim,
            "noise_sigma": spec.noise_sigma,
            "doc_image_fraction": spec.doc_image_fraction,
            "seed": spec.seed,
        },
        "queries": queries,
        "documents": documents,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir: str) -> dict:
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise DataError(f"no manifest.json under {data_dir}")
    with open(path) as fh:
        return json.load(fh)


def load_query_stacks(data_dir: str, entry: dict):
    text = read_feature_file(os.path.join(data_dir, entry["text_features"]))
    vis = None
    if entry.get("vis_features"):
        vis = read_feature_file(os.path.join(data_dir, entry["vis_features"]))
    return text, vis


load_doc_stacks = load_query_stacks


def load_training_pairs(data_dir: str, manifest: dict,
                        split: str = "train") -> list[BatchItem]:
    """Materialize (query, gold document) pairs for one split."""
    docs_by_id = {d["id"]: d for d in manifest["documents"]}
    pairs = []
    for q in manifest["queries"]:
        if split != "all" and q["split"] != split:
            continue
        doc = docs_by_id[q["gold_doc_id"]]
        q_text, q_vis = load_query_stacks(data_dir, q)
        d_text, d_vis = load_doc_stacks(data_dir, doc)
        pairs.append(BatchItem(query_text=q_text, query_vis=q_vis,
                               doc_text=d_text, doc_vis=d_vis))
    if not pairs:
        raise DataError(f"manifest has no queries in split {split!r}")
    return pairs


def batch_iterator(pairs: list[BatchItem], batch_size: int, seed: int):
    """Endless shuffled batches; reshuffles every epoch."""
    rng = np.random.default_rng([seed, len(pairs)])
    while True:
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs) - batch_size + 1, batch_size):
            yield [pairs[i] for i in order[start:start + batch_size]]

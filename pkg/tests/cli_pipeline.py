"""Runs every CLI command on a tiny configuration inside a working directory."""

import contextlib
import io
import math
import os
from pathlib import Path

import numpy as np

from stochpsr.cli import main

FAST = ["--d", "2", "--hidden-width", "12", "--depth", "3", "--samples", "1024", "--batch-size", "256",
        "--learning-rate", "1e-3", "--grid-resolution", "16", "--ray-samples", "8", "--qmc-points", "32",
        "--qmc-replicates", "2", "--mc-samples", "256", "--seed", "3"]

COMMANDS = {
    "reconstruct": ["reconstruct", "circle.xyz", "--epochs", "2", "--checkpoint-every", "1", "--out", "rec", *FAST],
    "query": ["query", "rec/model.nssi", "--grid", "9", "--out", "query"],
    "query-points": ["query", "rec/model.nssi", "--points", "pts.txt", "--out", "query-points"],
    "raycast": ["raycast", "rec/model.nssi", "--origin=-2,0.1", "--direction", "1,0", "--origin", "0,2",
                "--direction=0,-1", "--ray-samples", "8", "--qmc-points", "32", "--out", "raycast"],
    "nbv": ["nbv", "rec/model.nssi", "--nbv-starts", "2", "--nbv-steps", "2", "--ray-samples", "8",
            "--qmc-points", "32", "--qmc-replicates", "2", "--out", "nbv"],
    "scanloop": ["scanloop", "circle", "--strategy", "ours", "--max-rounds", "1", "--epochs", "1",
                 "--finetune-epochs", "1", "--nbv-starts", "2", "--nbv-steps", "1", "--stop-fraction", "0",
                 "--out", "scanloop", *FAST],
    "latent-train": ["latent-train", "a.xyz", "b.xyz", "--latent-width", "4", "--epochs", "1", "--out", "corpus",
                     *FAST],
    "latent-infer": ["latent-infer", "corpus/corpus.nssi", "b.xyz", "--infer-iters", "3", "--refine-epochs", "1",
                     "--out", "infer"],
    "nll": ["nll", "infer/model.nssi", "a.xyz", "--out", "nll"],
    "net-info": ["net-info", "rec/model.nssi"],
}


def write_inputs(root: Path):
    for name, start in (("a.xyz", 0.0), ("b.xyz", math.pi)):
        t = start + np.linspace(0, math.pi, 12)
        p = np.stack([np.cos(t), np.sin(t)], 1)
        np.savetxt(root / name, np.hstack([p, p]))
    np.savetxt(root / "pts.txt", np.array([[0.0, 0.0], [1.0, 0.0], [0.3, -1.4]]))


def run(argv, cwd: Path):
    """``(exit_code, stdout)`` of one in-process CLI call with ``cwd`` as working directory."""
    old = os.getcwd()
    out = io.StringIO()
    try:
        os.chdir(cwd)
        with contextlib.redirect_stdout(out):
            code = main(list(argv))
    finally:
        os.chdir(old)
    return code, out.getvalue()


def run_all(root: Path):
    """Every command in order; returns ``{name: (exit_code, stdout)}``."""
    root.mkdir(parents=True, exist_ok=True)
    write_inputs(root)
    return {name: run(argv, root) for name, argv in COMMANDS.items()}


def tree_bytes(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

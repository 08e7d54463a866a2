"""FitResult container and its deterministic JSON representation.

Everything a prediction needs is embedded: kernel spec with final
hyperparameters, latent-field snapshots, inducing locations, normalized
training data, normalization record, optimizer trace, seed, and the data
fingerprint. Volatile values (wall time, versions) go to a separate meta
dict so serialized fits are byte-identical across reruns.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .optim import TrainTrace


@dataclasses.dataclass
class FitResult:
    """Fitted model plus everything needed to reproduce and reuse it."""

    model: object                 # GpModel or SparseModel
    trace: TrainTrace
    seed: int
    family: str                   # "exact" | "sparse"
    normalization: dict = None
    fingerprint: dict = None

    def meta(self):
        from . import __version__

        return {
            "wall_time_seconds": None if self.trace is None else self.trace.wall_time,
            "package_version": __version__,
        }


def canonical_json(obj) -> str:
    """Stable JSON text: sorted keys, fixed indentation, shortest float repr."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def fit_to_json(fit: FitResult) -> dict:
    from . import exact, fields, kernels, sparse

    model = fit.model
    base = model.base if isinstance(model, sparse.SparseModel) else model
    out = {
        "family": fit.family,
        "transform": base.transform,
        "kernel": kernels.spec_to_json(base.kernel),
        "noise_variance": float(np.exp(np.asarray(base.log_noise2))),
        "fields": {ref: fields.field_to_json(f) for ref, f in base.fields.items()},
        "train": {
            "x": np.asarray(base.x).tolist(),
            "y": np.asarray(base.y).tolist(),
        },
        "trace": None
        if fit.trace is None
        else {
            "objective": np.asarray(fit.trace.objective_per_iter).tolist(),
            "grad_norm": np.asarray(fit.trace.grad_norm_per_iter).tolist(),
        },
        "diagnostics": None
        if fit.trace is None
        else {
            "iterations": int(len(fit.trace.objective_per_iter)),
            "final_objective": float(fit.trace.objective_per_iter[-1]),
        },
        "seed": int(fit.seed),
        "normalization": fit.normalization,
        "fingerprint": fit.fingerprint,
    }
    if isinstance(model, sparse.SparseModel):
        out["inducing"] = np.asarray(model.z).tolist()
        out["mm_jitter"] = float(model.mm_jitter)
    return out


def fit_from_json(obj) -> FitResult:
    from . import exact, fields, kernels, sparse

    import jax.numpy as jnp

    kernel = kernels.spec_from_json(obj["kernel"])
    flds = {ref: fields.field_from_json(f) for ref, f in obj.get("fields", {}).items()}
    # stored targets are already in model space, so bypass make_model's transform
    base = exact.GpModel(
        kernel=kernel,
        log_noise2=jnp.log(jnp.asarray(obj["noise_variance"], dtype=jnp.float64)),
        x=jnp.asarray(obj["train"]["x"], dtype=jnp.float64),
        y=jnp.asarray(obj["train"]["y"], dtype=jnp.float64),
        fields=flds,
        transform=obj.get("transform", "none"),
    )
    model = base
    if obj.get("family") == "sparse":
        model = sparse.SparseModel(
            base=base,
            z=jnp.asarray(obj["inducing"], dtype=jnp.float64),
            mm_jitter=float(obj.get("mm_jitter", 1e-10)),
        )
    trace = None
    if obj.get("trace"):
        trace = TrainTrace(
            objective_per_iter=np.asarray(obj["trace"]["objective"], dtype=np.float64),
            grad_norm_per_iter=np.asarray(obj["trace"]["grad_norm"], dtype=np.float64),
            wall_time=0.0,
        )
    return FitResult(
        model=model,
        trace=trace,
        seed=int(obj.get("seed", 0)),
        family=obj.get("family", "exact"),
        normalization=obj.get("normalization"),
        fingerprint=obj.get("fingerprint"),
    )


def save_fit(fit: FitResult, path):
    with open(path, "w") as fh:
        fh.write(canonical_json(fit_to_json(fit)))


def load_fit(path) -> FitResult:
    with open(path) as fh:
        return fit_from_json(json.load(fh))


def trace_csv_lines(trace: TrainTrace):
    yield "iteration,objective,grad_norm\n"
    for i, (o, g) in enumerate(zip(trace.objective_per_iter, trace.grad_norm_per_iter)):
        yield f"{i},{o!r},{g!r}\n"

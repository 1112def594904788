"""On-disk artifacts: the runinfo container, EM snapshots, NIfTI map output.

Container format (documented in docs/formats.md): a zip archive holding
`manifest.json` (schema version, kind, scalar fields, array index with
shapes and sha256 checksums) plus one little-endian float64 blob per array
field.
"""

from __future__ import annotations

import hashlib
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti
from .errors import GeometryError, SchemaError
from .ingest import MaskVolume
from .model import EmState, HcicaParams, MoGParams

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class RunInfo:
    """Serialized analysis setup; one object per analysis."""

    N: int
    X: np.ndarray  # (N, p) design matrix
    varNamesX: list  # design-matrix column names
    varInModel: list  # per original covariate: included in the model?
    interactions: list  # interaction pairs as design-column index pairs
    interactionsBase: list  # interaction pairs as original covariate names
    YtildeStar: np.ndarray  # (N*q, V) preprocessed data
    beta0Star: np.ndarray  # (V, p, q) initial covariate-effect maps
    covariates: list  # original covariate names
    covfile: str
    isCat: list  # per original covariate: categorical?
    maskfl: str
    niifiles: list  # subject data file paths
    numPCA: int
    outfolder: str
    prefix: str
    q: int
    thetaStar: HcicaParams  # full initial parameter value
    time_num: list  # timepoints per subject
    voxSize: list  # mask grid dims (3 ints)


def _params_arrays(params: HcicaParams, prefix):
    return {
        f"{prefix}.A": params.A,
        f"{prefix}.sigma0_sq": np.array([params.sigma0_sq]),
        f"{prefix}.D": params.D,
        f"{prefix}.mog_weights": params.mog.weights,
        f"{prefix}.mog_means": params.mog.means,
        f"{prefix}.mog_variances": params.mog.variances,
        f"{prefix}.B": params.B,
    }


def _params_from_arrays(arrays, prefix):
    return HcicaParams(
        A=arrays[f"{prefix}.A"],
        sigma0_sq=float(arrays[f"{prefix}.sigma0_sq"][0]),
        D=arrays[f"{prefix}.D"],
        mog=MoGParams(
            weights=arrays[f"{prefix}.mog_weights"],
            means=arrays[f"{prefix}.mog_means"],
            variances=arrays[f"{prefix}.mog_variances"],
        ),
        B=arrays[f"{prefix}.B"],
    )


def _write_container(path, kind, scalars, arrays):
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "scalars": scalars,
        "arrays": {},
    }
    blobs = {}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        blob = arr.tobytes()
        fname = name.replace("/", "_") + ".bin"
        manifest["arrays"][name] = {
            "file": fname,
            "shape": list(arr.shape),
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
        blobs[fname] = blob
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        for fname, blob in blobs.items():
            zf.writestr(fname, blob)


def _read_container(path, kind):
    with zipfile.ZipFile(path, "r") as zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise SchemaError(f"{path}: missing manifest.json")
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(
                f"{path}: schema version {manifest.get('schema_version')} != {SCHEMA_VERSION}"
            )
        if manifest.get("kind") != kind:
            raise SchemaError(f"{path}: container kind {manifest.get('kind')!r}, expected {kind!r}")
        arrays = {}
        for name, meta in manifest["arrays"].items():
            blob = zf.read(meta["file"])
            if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
                raise SchemaError(f"{path}: checksum failure for array {name!r}")
            arrays[name] = np.frombuffer(blob, dtype="<f8").reshape(meta["shape"]).copy()
    return manifest["scalars"], arrays


def _require(scalars, arrays, scalar_fields, array_fields, path):
    for f in scalar_fields:
        if f not in scalars:
            raise SchemaError(f"{path}: missing field {f!r}")
    for f in array_fields:
        if f not in arrays:
            raise SchemaError(f"{path}: missing array field {f!r}")


RUNINFO_SCALARS = [
    "N",
    "varNamesX",
    "varInModel",
    "interactions",
    "interactionsBase",
    "covariates",
    "covfile",
    "isCat",
    "maskfl",
    "niifiles",
    "numPCA",
    "outfolder",
    "prefix",
    "q",
    "time_num",
    "voxSize",
]


def write_runinfo(run: RunInfo, path, embed_data=True):
    """Write the runinfo container. With embed_data=False the preprocessed
    data matrix is replaced by its checksum (for very large analyses)."""
    scalars = {f: getattr(run, f) for f in RUNINFO_SCALARS}
    arrays = {"X": run.X, "beta0Star": run.beta0Star}
    arrays.update(_params_arrays(run.thetaStar, "thetaStar"))
    if embed_data:
        scalars["data_embedded"] = True
        arrays["YtildeStar"] = run.YtildeStar
    else:
        blob = np.ascontiguousarray(np.asarray(run.YtildeStar, dtype="<f8")).tobytes()
        scalars["data_embedded"] = False
        scalars["YtildeStar_sha256"] = hashlib.sha256(blob).hexdigest()
        scalars["YtildeStar_shape"] = list(run.YtildeStar.shape)
    _write_container(path, "runinfo", scalars, arrays)


def read_runinfo(path) -> RunInfo:
    scalars, arrays = _read_container(path, "runinfo")
    _require(scalars, arrays, RUNINFO_SCALARS + ["data_embedded"], ["X", "beta0Star", "thetaStar.A"], path)
    known = set(RUNINFO_SCALARS) | {"data_embedded", "YtildeStar_sha256", "YtildeStar_shape"}
    for extra in set(scalars) - known:
        log.warning("%s: ignoring unknown field %r", path, extra)
    if scalars["data_embedded"]:
        ytilde = arrays["YtildeStar"]
    else:
        ytilde = None
    return RunInfo(
        N=scalars["N"],
        X=arrays["X"],
        varNamesX=scalars["varNamesX"],
        varInModel=scalars["varInModel"],
        interactions=scalars["interactions"],
        interactionsBase=scalars["interactionsBase"],
        YtildeStar=ytilde,
        beta0Star=arrays["beta0Star"],
        covariates=scalars["covariates"],
        covfile=scalars["covfile"],
        isCat=scalars["isCat"],
        maskfl=scalars["maskfl"],
        niifiles=scalars["niifiles"],
        numPCA=scalars["numPCA"],
        outfolder=scalars["outfolder"],
        prefix=scalars["prefix"],
        q=scalars["q"],
        thetaStar=_params_from_arrays(arrays, "thetaStar"),
        time_num=scalars["time_num"],
        voxSize=scalars["voxSize"],
    )


def write_snapshot(state: EmState, path, posterior=None):
    """Write an EM snapshot (iteration counter, parameters, history, and
    optional final-iteration posterior summaries)."""
    scalars = {
        "iteration": state.iteration,
        "termination": state.termination,
    }
    arrays = {
        "history": np.asarray(state.history, dtype=float).reshape(-1, 2),
        "loglik_history": np.asarray(state.loglik_history, dtype=float),
    }
    arrays.update(_params_arrays(state.params, "params"))
    if posterior is not None:
        arrays["posterior.s0_mean"] = posterior.s0_mean
        arrays["posterior.si_mean"] = posterior.si_mean
    _write_container(path, "snapshot", scalars, arrays)


def read_snapshot(path):
    """Read a snapshot. Returns (EmState, posterior_summaries or None)."""
    scalars, arrays = _read_container(path, "snapshot")
    _require(scalars, arrays, ["iteration", "termination"], ["history", "params.A"], path)
    state = EmState(
        iteration=scalars["iteration"],
        params=_params_from_arrays(arrays, "params"),
        history=[tuple(row) for row in arrays["history"]],
        loglik_history=list(arrays["loglik_history"]),
        termination=scalars["termination"],
    )
    summaries = None
    if "posterior.s0_mean" in arrays:
        summaries = {
            "s0_mean": arrays["posterior.s0_mean"],
            "si_mean": arrays["posterior.si_mean"],
        }
    return state, summaries


def map_filename(prefix, kind, ic):
    """Naming contract for exported maps (1-based IC index in the name)."""
    return f"{prefix}_{kind}_IC{ic}.nii"


def write_map_nifti(vmap, mask: MaskVolume, reference_header, path):
    """Write a masked map as a float32 volume; out-of-mask voxels are 0."""
    values = np.asarray(vmap.values if hasattr(vmap, "values") else vmap, dtype=np.float64)
    if values.shape != (mask.n_voxels,):
        raise GeometryError(f"map length {values.shape} != mask V={mask.n_voxels}")
    grid = mask.unmask(values)
    nifti.write_nifti(path, grid.astype(np.float32), reference_header)
    return Path(path)

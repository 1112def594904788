"""End-to-end analysis orchestration shared by the CLI and the service."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import persistence
from .em import FittedModel, em_run, estep
from .errors import HcicaError
from .inference import beta_covariance, population_average_map, VolumeMap
from .ingest import (
    apply_mask,
    build_design_matrix,
    match_subject_files,
    parse_covariate_table,
    read_mask_volume,
    read_nifti_volume,
)
from .initialization import run_initial_analysis
from .model import EmConfig
from .preprocess import reduce_and_whiten

log = logging.getLogger(__name__)

RUNINFO_NAME = "runinfo.hcz"
SNAPSHOT_NAME = "snapshot.hcz"


def analysis_dir(outdir, prefix):
    return Path(outdir) / prefix


def run_analysis(
    datadir,
    outdir,
    q,
    N,
    number_of_pcs,
    maskf,
    covf,
    prefix,
    maxit,
    eps_global,
    eps_local,
    m=2,
    seed=0,
    progress_sink=None,
    stop_signal=None,
    interactions=(),
    type_overrides=None,
    reference_overrides=None,
):
    """Ingest, preprocess, initialize, fit, and export a full analysis.

    Returns (EmState, FittedModel, output directory).
    """
    table = parse_covariate_table(covf)
    if table.n_subjects != N:
        raise HcicaError(f"N={N} does not match covariate file rows ({table.n_subjects})")
    design = build_design_matrix(
        table,
        type_overrides=type_overrides,
        reference_overrides=reference_overrides,
        interactions=interactions,
    )
    mask = read_mask_volume(maskf)
    files = match_subject_files(table, datadir)

    raw_mats, time_num, ref_header = [], [], None
    for path in files:
        vol = read_nifti_volume(path)
        if ref_header is None:
            ref_header = vol.header
        raw_mats.append(apply_mask(vol, mask))
        time_num.append(vol.dims[3])

    whitened = np.stack([reduce_and_whiten(Y, q).Y for Y in raw_mats])
    gica, init = run_initial_analysis(raw_mats, design.X, whitened, number_of_pcs, q, m=m, seed=seed)

    outpath = analysis_dir(outdir, prefix)
    outpath.mkdir(parents=True, exist_ok=True)

    run = persistence.RunInfo(
        N=N,
        X=design.X,
        varNamesX=design.column_names,
        varInModel=[True] * len(table.names),
        interactions=[
            [design.column_names.index(a) if a in design.column_names else -1 for a in pair]
            for pair in interactions
        ],
        interactionsBase=[list(pair) for pair in interactions],
        YtildeStar=whitened.reshape(N * q, mask.n_voxels),
        beta0Star=init.B,
        covariates=list(table.names),
        covfile=str(covf),
        isCat=[table.kinds[name] == "categorical" for name in table.names],
        maskfl=str(maskf),
        niifiles=[str(f) for f in files],
        numPCA=number_of_pcs,
        outfolder=str(outdir),
        prefix=prefix,
        q=q,
        thetaStar=init,
        time_num=time_num,
        voxSize=list(mask.dims),
    )
    persistence.write_runinfo(run, outpath / RUNINFO_NAME)

    config = EmConfig(max_iterations=maxit, eps_global=eps_global, eps_local=eps_local, seed=seed)

    def write_snapshot(state):
        persistence.write_snapshot(state, outpath / SNAPSHOT_NAME)

    state, fitted = em_run(
        whitened,
        design.X,
        init,
        config,
        progress_sink=progress_sink,
        stop_signal=stop_signal,
        snapshot_writer=write_snapshot,
    )
    persistence.write_snapshot(state, outpath / SNAPSHOT_NAME, posterior=fitted.posterior)
    export_default_maps(fitted, mask, ref_header, outpath, prefix)
    return state, fitted, outpath


def export_default_maps(fitted: FittedModel, mask, ref_header, outpath, prefix):
    """Write the standard map families: source, aggregate, effect, SE."""
    outpath = Path(outpath)
    q, p = fitted.params.q, fitted.params.p
    for l in range(q):
        persistence.write_map_nifti(
            VolumeMap(fitted.posterior.s0_mean[:, l], "intensity", l, "s0"),
            mask,
            ref_header,
            outpath / persistence.map_filename(prefix, "S0", l + 1),
        )
    for vmap in population_average_map(fitted):
        persistence.write_map_nifti(
            vmap,
            mask,
            ref_header,
            outpath / persistence.map_filename(prefix, "aggregate", vmap.ic + 1),
        )
    cov = beta_covariance(fitted, mode="plug-in")
    for k in range(p):
        for l in range(q):
            persistence.write_map_nifti(
                VolumeMap(fitted.params.B[:, k, l], "intensity", l, f"beta{k + 1}"),
                mask,
                ref_header,
                outpath / persistence.map_filename(prefix, f"beta{k + 1}", l + 1),
            )
            se = np.sqrt(cov[:, k * q + l, k * q + l])
            persistence.write_map_nifti(
                VolumeMap(se, "intensity", l, f"se{k + 1}"),
                mask,
                ref_header,
                outpath / persistence.map_filename(prefix, f"se{k + 1}", l + 1),
            )


class AnalysisStore:
    """A fitted (or resumable) analysis directory: runinfo + snapshot."""

    def __init__(self, path):
        self.path = Path(path)
        if not (self.path / RUNINFO_NAME).exists():
            raise FileNotFoundError(f"no {RUNINFO_NAME} in {self.path}")
        self.runinfo = persistence.read_runinfo(self.path / RUNINFO_NAME)
        self.state = None
        if (self.path / SNAPSHOT_NAME).exists():
            self.state, _ = persistence.read_snapshot(self.path / SNAPSHOT_NAME)
        self.mask = read_mask_volume(self.runinfo.maskfl)
        self._fitted = None

    @property
    def Y(self):
        run = self.runinfo
        if run.YtildeStar is None:
            raise HcicaError("runinfo was written without embedded data; cannot recompute")
        return run.YtildeStar.reshape(run.N, run.q, -1)

    def reference_header(self):
        vol = read_nifti_volume(self.runinfo.niifiles[0])
        return vol.header

    def fitted(self) -> FittedModel:
        """FittedModel from the latest snapshot (posteriors recomputed)."""
        if self._fitted is None:
            if self.state is None:
                raise HcicaError(f"no snapshot in {self.path}; run the analysis first")
            post, ll = estep(self.Y, self.runinfo.X, self.state.params)
            self._fitted = FittedModel(
                params=self.state.params, posterior=post, X=self.runinfo.X, loglik=ll
            )
        return self._fitted

    def resume(self, maxit, eps_global, eps_local, progress_sink=None, stop_signal=None):
        """Continue EM from the stored snapshot."""
        if self.state is None:
            raise HcicaError("nothing to resume: no snapshot present")
        config = EmConfig(max_iterations=maxit, eps_global=eps_global, eps_local=eps_local)
        start = self.state

        def write_snapshot(state):
            persistence.write_snapshot(state, self.path / SNAPSHOT_NAME)

        state, fitted = em_run(
            self.Y,
            self.runinfo.X,
            start.params,
            config,
            progress_sink=progress_sink,
            stop_signal=stop_signal,
            snapshot_writer=write_snapshot,
        )
        # splice histories so the resumed state continues the original run
        state.history = list(start.history) + list(state.history)
        state.loglik_history = list(start.loglik_history) + list(state.loglik_history)
        state.iteration += start.iteration
        persistence.write_snapshot(state, self.path / SNAPSHOT_NAME, posterior=fitted.posterior)
        self.state = state
        self._fitted = fitted
        return state, fitted

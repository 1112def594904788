"""Shared fixtures: a small fitted model and a full CLI analysis directory."""

import numpy as np
import pytest

from hcica import nifti
from hcica.cli import main as cli_main
from hcica.em import em_run
from hcica.model import EmConfig
from hcica.simulate import sample_model, sample_timeseries_dataset


@pytest.fixture(scope="session")
def small_fit():
    """A quick synthetic fit used by inference-level tests."""
    sim = sample_model(N=8, q=2, V=400, p=2, seed=3)
    config = EmConfig(max_iterations=8, eps_global=1e-9, eps_local=1e-9)
    state, fitted = em_run(sim.Y, sim.X, sim.params.copy(), config)
    return sim, fitted


def write_dataset(root, N=24, q=3, T=40, dims=(8, 7, 6), seed=5, beta_scale=1.0):
    """Materialize a synthetic time-series dataset as NIfTI files + CSV."""
    datadir = root / "data"
    datadir.mkdir(parents=True, exist_ok=True)
    vols, mask, rows, sim = sample_timeseries_dataset(
        N=N, q=q, T=T, dims=dims, seed=seed, beta_scale=beta_scale
    )
    for i, vol in enumerate(vols):
        nifti.write_nifti(datadir / f"subj{i + 1}.nii", vol.astype(np.float32))
    nifti.write_nifti(root / "mask.nii", mask.astype(np.float32))
    covf = root / "cov.csv"
    covf.write_text("\n".join(",".join(r) for r in rows) + "\n")
    return {"datadir": datadir, "mask": root / "mask.nii", "covf": covf, "sim": sim}


@pytest.fixture(scope="session")
def cli_analysis(tmp_path_factory):
    """One full CLI run over the bundled 24-subject synthetic dataset."""
    root = tmp_path_factory.mktemp("clirun")
    ds = write_dataset(root)
    rc = cli_main(
        [
            "run",
            "--datadir", str(ds["datadir"]),
            "--outdir", str(root / "out"),
            "--q", "3",
            "--N", "24",
            "--numberOfPCs", "8",
            "--maskf", str(ds["mask"]),
            "--covf", str(ds["covf"]),
            "--prefix", "demo",
            "--maxit", "12",
        ]
    )
    assert rc == 0
    ds["root"] = root
    ds["analysis"] = root / "out" / "demo"
    return ds

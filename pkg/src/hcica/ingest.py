"""Data ingestion: 4D volumes, brain masks, covariate tables, design matrices."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti
from .errors import DesignError, GeometryError, TableParseError


@dataclass
class Volume4D:
    """A 4D scan: X*Y*Z voxel grid over T timepoints, plus its header."""

    dims: tuple  # (X, Y, Z, T)
    data: np.ndarray  # shape (X, Y, Z, T), float64
    header: np.void  # raw NIfTI header record, kept for output geometry

    def __post_init__(self):
        if len(self.dims) != 4 or any(d < 1 for d in self.dims):
            raise GeometryError(f"invalid 4D dims {self.dims}")
        if self.data.shape != tuple(self.dims):
            raise GeometryError(f"data shape {self.data.shape} != dims {self.dims}")


@dataclass
class MaskVolume:
    """Boolean inclusion grid with a fixed voxel -> column ordering."""

    dims: tuple  # (X, Y, Z)
    flags: np.ndarray  # bool, shape dims

    def __post_init__(self):
        if self.flags.shape != tuple(self.dims):
            raise GeometryError(f"mask shape {self.flags.shape} != dims {self.dims}")
        if self.n_voxels < 1:
            raise GeometryError("mask includes no voxels")

    @property
    def n_voxels(self):
        return int(self.flags.sum())

    @property
    def linear_indices(self):
        """Fortran-order linear indices of included voxels; column v of a
        masked data matrix corresponds to linear_indices[v]."""
        return np.flatnonzero(self.flags.ravel(order="F"))

    def unmask(self, values, fill=0.0):
        """Scatter a length-V vector back onto the full grid."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_voxels,):
            raise GeometryError(f"expected {self.n_voxels} values, got {values.shape}")
        grid = np.full(int(np.prod(self.dims)), fill, dtype=np.float64)
        grid[self.linear_indices] = values
        return grid.reshape(self.dims, order="F")


@dataclass
class CovariateTable:
    """Parsed covariate CSV: subject filenames plus typed covariate columns."""

    subjects: list  # filenames, column 1 of the csv
    names: list  # covariate names in file order
    columns: dict  # name -> list of raw string cells
    kinds: dict  # name -> "continuous" | "categorical"

    @property
    def n_subjects(self):
        return len(self.subjects)

    def levels(self, name):
        """Observed levels of a column, in first-appearance order."""
        seen = []
        for cell in self.columns[name]:
            if cell not in seen:
                seen.append(cell)
        return seen


@dataclass
class DesignMatrix:
    """Coded N x p design matrix with column provenance."""

    X: np.ndarray
    column_names: list
    column_origin: list  # "main" | "interaction" per column
    references: dict = field(default_factory=dict)  # categorical name -> reference level

    @property
    def p(self):
        return self.X.shape[1]


def read_nifti_volume(path) -> Volume4D:
    """Read a (possibly gzipped) NIfTI-1 file as a 4D volume.

    3D files are promoted to T=1. Values are float64 with scl_slope/scl_inter
    applied; the header is retained for later output writing.
    """
    data, header = nifti.read_nifti(path)
    if data.ndim == 3:
        data = data[..., np.newaxis]
    if data.ndim != 4:
        raise GeometryError(f"{path}: expected 3D or 4D volume, got ndim={data.ndim}")
    return Volume4D(dims=data.shape, data=data, header=header)


def read_mask_volume(path) -> MaskVolume:
    """Read a mask file; any nonzero voxel is included."""
    data, _ = nifti.read_nifti(path)
    if data.ndim == 4:
        if data.shape[3] != 1:
            raise GeometryError(f"{path}: mask must be 3D")
        data = data[..., 0]
    return MaskVolume(dims=data.shape, flags=data != 0)


def apply_mask(vol: Volume4D, mask: MaskVolume) -> np.ndarray:
    """Extract the T x V data matrix of in-mask time series."""
    if tuple(vol.dims[:3]) != tuple(mask.dims):
        raise GeometryError(f"volume spatial dims {vol.dims[:3]} != mask dims {mask.dims}")
    T = vol.dims[3]
    flat = vol.data.reshape(-1, T, order="F")  # (XYZ, T), Fortran voxel order
    return np.ascontiguousarray(flat[mask.linear_indices, :].T)


def _is_number(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


def parse_covariate_table(path) -> CovariateTable:
    """Parse the covariate CSV.

    First header must be "subject". Columns where every cell parses as a
    number default to continuous; any non-numeric cell makes the column
    categorical. Empty cells and ragged rows are hard errors.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TableParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "subject":
        raise TableParseError(f'{path}: first header must be "subject", got {header[:1]}')
    names = header[1:]
    if len(set(names)) != len(names):
        raise TableParseError(f"{path}: duplicated covariate names")

    subjects = []
    columns = {name: [] for name in names}
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(cell.strip() == "" for cell in row):
            continue
        if len(row) != len(header):
            raise TableParseError(f"{path}: ragged row {r}", row=r)
        for c, cell in enumerate(row):
            if cell.strip() == "":
                raise TableParseError(f"{path}: empty cell at row {r}, column {c + 1}", row=r, column=c + 1)
        subjects.append(row[0].strip())
        for name, cell in zip(names, row[1:]):
            columns[name].append(cell.strip())

    if len(set(subjects)) != len(subjects):
        raise TableParseError(f"{path}: duplicated subject filename")

    kinds = {}
    for name in names:
        numeric = all(_is_number(cell) for cell in columns[name])
        kinds[name] = "continuous" if numeric else "categorical"
    table = CovariateTable(subjects=subjects, names=names, columns=columns, kinds=kinds)
    for name in names:
        if kinds[name] == "categorical" and len(table.levels(name)) < 2:
            raise TableParseError(f"{path}: categorical covariate {name!r} has fewer than 2 levels")
    return table


def build_design_matrix(
    table: CovariateTable,
    type_overrides=None,
    reference_overrides=None,
    interactions=(),
    include=None,
) -> DesignMatrix:
    """Code covariates into the N x p design matrix.

    Categorical covariates get k-1 reference-cell indicators, continuous ones
    pass through uncentered; pairwise interaction columns (products of coded
    columns) are appended after the main effects.
    """
    type_overrides = dict(type_overrides or {})
    reference_overrides = dict(reference_overrides or {})
    included = list(include) if include is not None else list(table.names)

    for name in list(type_overrides) + list(reference_overrides) + included:
        if name not in table.names:
            raise DesignError(f"unknown covariate {name!r}")
    for pair in interactions:
        if len(pair) != 2:
            raise DesignError(f"interactions must be pairwise, got {pair!r}")
        for name in pair:
            if name not in included:
                raise DesignError(f"interaction names excluded covariate {name!r}")

    kinds = dict(table.kinds)
    kinds.update(type_overrides)

    # coded main-effect columns, grouped per covariate
    coded = {}  # name -> list of (colname, values)
    references = {}
    N = table.n_subjects
    for name in included:
        cells = table.columns[name]
        if kinds[name] == "continuous":
            coded[name] = [(name, np.array([float(c) for c in cells]))]
        else:
            levels = table.levels(name)
            if len(levels) < 2:
                raise DesignError(f"categorical covariate {name!r} has fewer than 2 levels")
            ref = reference_overrides.get(name, levels[0])
            if ref not in levels:
                raise DesignError(f"reference level {ref!r} not observed for {name!r}")
            references[name] = ref
            cols = []
            for lev in levels:
                if lev == ref:
                    continue
                values = np.array([1.0 if c == lev else 0.0 for c in cells])
                cols.append((f"{name}_{lev}", values))
            coded[name] = cols

    columns, names_out, origin = [], [], []
    for name in included:
        for colname, values in coded[name]:
            columns.append(values)
            names_out.append(colname)
            origin.append("main")
    for a, b in interactions:
        for aname, avals in coded[a]:
            for bname, bvals in coded[b]:
                columns.append(avals * bvals)
                names_out.append(f"{aname}_x_{bname}")
                origin.append("interaction")

    if not columns:
        raise DesignError("design matrix has no columns; include at least one covariate")
    X = np.column_stack(columns)
    if X.shape != (N, len(columns)):
        raise DesignError("internal shape error building design matrix")
    zero = np.all(X == 0.0, axis=0)
    if zero.any():
        bad = names_out[int(np.flatnonzero(zero)[0])]
        raise DesignError(f"column {bad!r} is constant zero")
    return DesignMatrix(X=X, column_names=names_out, column_origin=origin, references=references)


def match_subject_files(table: CovariateTable, data_dir) -> list:
    """Resolve covariate-file subject names against the data directory.

    Absolute paths pass through; relative names resolve under data_dir.
    """
    data_dir = Path(data_dir)
    paths = []
    for name in table.subjects:
        p = Path(name)
        if not p.is_absolute():
            p = data_dir / p
        if not p.exists():
            raise FileNotFoundError(f"subject file not found: {p}")
        paths.append(p)
    return paths

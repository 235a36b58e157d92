"""Time series of cell fields and their on-disk binary form.

A trajectory couples a structured grid with read-out times and one float64
value block of shape (n_times, n_cells, n_components).  Temperature
trajectories carry one component; stress trajectories carry the six Voigt
components (s11, s22, s33, s23, s13, s12).

The file format ("DTRJ") is little-endian and versioned:

    bytes 0:4    magic "DTRJ"
    uint32       format version (currently 1)
    uint32 x 3   nx, ny, nz cell counts
    float64 x 3  lx, ly, lz extents [m]
    float64 x 2  grading_y, grading_z
    uint32       n_components
    uint32       n_times
    uint32       byte length of the component-label block
    bytes        component labels, utf-8, null separated
    float64[]    read-out times, strictly increasing
    float64[]    snapshots, row-major (time, cell, component)

Cells are indexed in C order over (nx, ny, nz).  Writes refuse non-finite
values so stored artifacts are always clean.
"""

import struct

import numpy as np

from .errors import ArtifactError
from .grid import StructuredGrid

MAGIC = b"DTRJ"
VERSION = 1

STRESS_COMPONENTS = ("s11", "s22", "s33", "s23", "s13", "s12")


class FieldTrajectory:
    """Cell-field time series on a structured grid."""

    def __init__(self, grid, times, data, components=("T",)):
        times = np.asarray(times, dtype=float)
        data = np.asarray(data, dtype=float)
        if times.ndim != 1 or times.size == 0:
            raise ArtifactError("trajectory needs a non-empty 1-D time array")
        if np.any(np.diff(times) <= 0):
            raise ArtifactError("trajectory times must be strictly increasing")
        if data.ndim == 2:
            data = data[:, :, None]
        if data.shape[0] != times.size:
            raise ArtifactError(
                f"{data.shape[0]} snapshots for {times.size} times")
        if data.shape[1] != grid.n_cells:
            raise ArtifactError(
                f"snapshot size {data.shape[1]} != cell count {grid.n_cells}")
        if data.shape[2] != len(components):
            raise ArtifactError(
                f"{data.shape[2]} components vs labels {components}")
        self.grid = grid
        self.times = times
        self.data = data
        self.components = tuple(str(c) for c in components)

    @property
    def n_times(self):
        return self.times.size

    @property
    def n_components(self):
        return len(self.components)

    def component(self, label):
        """(n_times, n_cells) slice of one named component."""
        try:
            idx = self.components.index(label)
        except ValueError:
            raise ArtifactError(
                f"no component {label!r} in {self.components}") from None
        return self.data[:, :, idx]

    def field3d(self, time_index, component=0):
        """One snapshot reshaped to the grid, for plotting and probing."""
        return self.data[time_index, :, component].reshape(self.grid.shape)

    def save(self, path):
        """Write the trajectory; rejects NaN/Inf so artifacts stay clean."""
        if not np.all(np.isfinite(self.data)):
            raise ArtifactError("refusing to write non-finite field values")
        g = self.grid
        labels = b"\x00".join(c.encode("utf-8") for c in self.components)
        header = struct.pack(
            "<4sIIIIdddddIII", MAGIC, VERSION, g.nx, g.ny, g.nz,
            g.lx, g.ly, g.lz, g.grading_y, g.grading_z,
            self.n_components, self.n_times, len(labels))
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(labels)
            fh.write(np.ascontiguousarray(self.times, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        head_fmt = "<4sIIIIdddddIII"
        head_len = struct.calcsize(head_fmt)
        with open(path, "rb") as fh:
            raw = fh.read(head_len)
            if len(raw) < head_len:
                raise ArtifactError(f"{path}: truncated header")
            (magic, version, nx, ny, nz, lx, ly, lz, gy, gz,
             n_comp, n_times, label_len) = struct.unpack(head_fmt, raw)
            if magic != MAGIC:
                raise ArtifactError(f"{path}: bad magic {magic!r}")
            if version != VERSION:
                raise ArtifactError(
                    f"{path}: format version {version}, expected {VERSION}")
            labels = fh.read(label_len)
            if len(labels) < label_len:
                raise ArtifactError(f"{path}: truncated label block")
            components = tuple(p.decode("utf-8")
                               for p in labels.split(b"\x00")) if label_len else ()
            if len(components) != n_comp:
                raise ArtifactError(f"{path}: label count mismatch")
            grid = StructuredGrid(nx, ny, nz, lx, ly, lz,
                                  grading_y=gy, grading_z=gz)
            times = np.frombuffer(fh.read(8 * n_times), dtype="<f8")
            if times.size != n_times:
                raise ArtifactError(f"{path}: truncated time array")
            want = n_times * grid.n_cells * n_comp
            data = np.frombuffer(fh.read(8 * want), dtype="<f8")
            if data.size != want:
                raise ArtifactError(f"{path}: truncated data block")
            if fh.read(1):
                raise ArtifactError(f"{path}: trailing bytes after data block")
        data = data.reshape(n_times, grid.n_cells, n_comp).astype(float)
        if not np.all(np.isfinite(data)):
            raise ArtifactError(f"{path}: non-finite values in data block")
        return cls(grid, times.astype(float), data, components)

    def to_csv(self, path, cell_indices, point_labels=None):
        """Write probe series: one time column, then one column per
        (point, component) pair."""
        cell_indices = np.asarray(cell_indices, dtype=int)
        if point_labels is None:
            point_labels = [f"c{int(i)}" for i in cell_indices]
        cols = ["time_s"]
        for lbl in point_labels:
            for comp in self.components:
                cols.append(f"{lbl}_{comp}")
        block = self.data[:, cell_indices, :].reshape(self.n_times, -1)
        table = np.column_stack([self.times, block])
        np.savetxt(path, table, delimiter=",", header=",".join(cols), comments="")

    def __repr__(self):
        return (f"FieldTrajectory({self.n_times} times, {self.grid!r}, "
                f"components={self.components})")

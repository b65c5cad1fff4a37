"""Versioned binary artifact formats plus CSV exports.

Every format starts with an 8-byte magic string, a version word and a small
fixed header, followed by raw little-endian 64-bit values.  Loading checks
magic, version and declared shapes and refuses mismatched architectures.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import FileFormatError
from .filtering import AnalysisSeries
from .interpolation import InterpolatedField
from .model import Trajectory
from .network import Architecture, NetworkParameters, TRAINABLE
from .observations import ObservationSeries

TRAJ_MAGIC = b"L96TRAJ\x00"
OBS_MAGIC = b"L96OBS\x00\x00"
ANA_MAGIC = b"L96ANA\x00\x00"
NET_MAGIC = b"L96NET\x00\x00"
OPT_MAGIC = b"L96OPT\x00\x00"
MASK_MAGIC = b"L96MASK\x00"
VERSION = 1

PARAM_ORDER = (
    "bn_scale", "bn_shift", "bn_mean", "bn_var",
    "w2a", "b2a", "w2b", "b2b", "w2c", "b2c", "w3", "b3", "w4", "b4",
)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FileFormatError(f"truncated file while reading {what}")
    return data


def _check_magic(f, magic: bytes, path: Path) -> None:
    if _read_exact(f, len(magic), "magic") != magic:
        raise FileFormatError(f"{path}: wrong magic string")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")


def _read_array(f, count: int, what: str, dtype=np.float64) -> np.ndarray:
    nbytes = count * np.dtype(dtype).itemsize
    return np.frombuffer(_read_exact(f, nbytes, what), dtype=dtype).copy()


# --- trajectory -------------------------------------------------------------


def save_trajectory(traj: Trajectory, path: Path) -> None:
    path = Path(path)
    with path.open("wb") as f:
        f.write(TRAJ_MAGIC)
        f.write(struct.pack("<IIId", VERSION, traj.m, traj.n_steps, traj.step))
        f.write(np.ascontiguousarray(traj.states, dtype="<f8").tobytes())


def load_trajectory(path: Path) -> Trajectory:
    path = Path(path)
    with path.open("rb") as f:
        _check_magic(f, TRAJ_MAGIC, path)
        m, K = struct.unpack("<II", _read_exact(f, 8, "header"))
        (h,) = struct.unpack("<d", _read_exact(f, 8, "step"))
        states = _read_array(f, (K + 1) * m, "states").reshape(K + 1, m)
    return Trajectory(states=states, step=h)


def export_trajectory_csv(traj: Trajectory, path: Path) -> None:
    np.savetxt(path, traj.states, delimiter=",", fmt="%.17g")


# --- observations -----------------------------------------------------------


def save_observations(obs: ObservationSeries, path: Path) -> None:
    path = Path(path)
    with path.open("wb") as f:
        f.write(OBS_MAGIC)
        f.write(struct.pack("<IIIdq", VERSION, obs.K, obs.p, obs.sigma_obs, obs.seed))
        f.write(np.ascontiguousarray(obs.indices, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(obs.values, dtype="<f8").tobytes())


def load_observations(path: Path) -> ObservationSeries:
    path = Path(path)
    with path.open("rb") as f:
        _check_magic(f, OBS_MAGIC, path)
        K, p = struct.unpack("<II", _read_exact(f, 8, "header"))
        sigma_obs, seed = struct.unpack("<dq", _read_exact(f, 16, "header"))
        indices = _read_array(f, K * p, "indices", dtype=np.int64).reshape(K, p)
        values = _read_array(f, K * p, "values").reshape(K, p)
    return ObservationSeries(
        indices=indices, values=values, sigma_obs=sigma_obs, seed=seed
    )


def export_observations_csv(obs: ObservationSeries, path: Path) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["k", "index", "value"])
        for j in range(obs.K):
            for i, v in zip(obs.indices[j], obs.values[j]):
                writer.writerow([j + 1, int(i), repr(float(v))])


# --- analysis series --------------------------------------------------------


def save_analysis(
    ana: AnalysisSeries, path: Path, N: int, sigma_m: float, seed: int
) -> None:
    path = Path(path)
    K, m = ana.means.shape
    with path.open("wb") as f:
        f.write(ANA_MAGIC)
        f.write(struct.pack("<IIIIdq", VERSION, m, K, N, sigma_m, seed))
        f.write(np.ascontiguousarray(ana.means, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ana.variances, dtype="<f8").tobytes())


def load_analysis(path: Path) -> AnalysisSeries:
    path = Path(path)
    with path.open("rb") as f:
        _check_magic(f, ANA_MAGIC, path)
        m, K, _N = struct.unpack("<III", _read_exact(f, 12, "header"))
        struct.unpack("<dq", _read_exact(f, 16, "header"))
        means = _read_array(f, K * m, "means").reshape(K, m)
        variances = _read_array(f, K * m, "variances").reshape(K, m)
    return AnalysisSeries(means=means, variances=variances)


def export_analysis_csv(ana: AnalysisSeries, path: Path) -> None:
    K, m = ana.means.shape
    out = np.concatenate([ana.means, ana.variances], axis=1)
    header = ",".join(
        [f"mean_{n}" for n in range(m)] + [f"var_{n}" for n in range(m)]
    )
    np.savetxt(path, out, delimiter=",", fmt="%.17g", header=header, comments="")


# --- network weights --------------------------------------------------------


def save_weights(params: NetworkParameters, path: Path) -> None:
    path = Path(path)
    a = params.arch
    with path.open("wb") as f:
        f.write(NET_MAGIC)
        f.write(
            struct.pack(
                "<IIIIII", VERSION, a.m, a.branch_channels, a.branch_kernel,
                a.mix_channels, a.mix_kernel,
            )
        )
        for name in PARAM_ORDER:
            f.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())


def load_weights(path: Path, expected: Architecture | None = None) -> NetworkParameters:
    from .network import init_parameters

    path = Path(path)
    with path.open("rb") as f:
        _check_magic(f, NET_MAGIC, path)
        m, bc, bk, mc, mk = struct.unpack("<IIIII", _read_exact(f, 20, "architecture"))
        arch = Architecture(
            m=m, branch_channels=bc, branch_kernel=bk, mix_channels=mc, mix_kernel=mk
        )
        if expected is not None and arch != expected:
            raise FileFormatError(
                f"{path}: architecture mismatch (file {arch}, expected {expected})"
            )
        params = init_parameters(arch, seed=0)
        for name in PARAM_ORDER:
            shape = getattr(params, name).shape
            arr = _read_array(f, int(np.prod(shape)), name).reshape(shape)
            setattr(params, name, arr)
    return params


# --- optimizer state ---------------------------------------------------------


def save_optimizer(opt, arch: Architecture, path: Path) -> None:
    """Adagrad squared-gradient accumulators, one group per trainable tensor."""
    path = Path(path)
    with path.open("wb") as f:
        f.write(OPT_MAGIC)
        f.write(
            struct.pack(
                "<IIIIIIdd", VERSION, arch.m, arch.branch_channels,
                arch.branch_kernel, arch.mix_channels, arch.mix_kernel,
                opt.lr, opt.eps,
            )
        )
        for name in TRAINABLE:
            f.write(np.ascontiguousarray(opt.accumulators[name], dtype="<f8").tobytes())


def load_optimizer(path: Path, expected: Architecture | None = None):
    from .network import init_parameters, zero_gradients
    from .training import OptimizerState

    path = Path(path)
    with path.open("rb") as f:
        _check_magic(f, OPT_MAGIC, path)
        m, bc, bk, mc, mk = struct.unpack("<IIIII", _read_exact(f, 20, "architecture"))
        lr, eps = struct.unpack("<dd", _read_exact(f, 16, "optimizer header"))
        arch = Architecture(
            m=m, branch_channels=bc, branch_kernel=bk, mix_channels=mc, mix_kernel=mk
        )
        if expected is not None and arch != expected:
            raise FileFormatError(
                f"{path}: architecture mismatch (file {arch}, expected {expected})"
            )
        acc = zero_gradients(init_parameters(arch, seed=0))
        for name in TRAINABLE:
            shape = acc[name].shape
            acc[name] = _read_array(f, int(np.prod(shape)), name).reshape(shape)
    return OptimizerState(accumulators=acc, lr=lr, eps=eps)


# --- observation mask -------------------------------------------------------


def save_mask(mask: np.ndarray, path: Path) -> None:
    path = Path(path)
    K, m = mask.shape
    with path.open("wb") as f:
        f.write(MASK_MAGIC)
        f.write(struct.pack("<III", VERSION, K, m))
        f.write(np.packbits(mask.astype(np.uint8)).tobytes())


def load_mask(path: Path) -> np.ndarray:
    path = Path(path)
    with path.open("rb") as f:
        _check_magic(f, MASK_MAGIC, path)
        K, m = struct.unpack("<II", _read_exact(f, 8, "header"))
        nbytes = (K * m + 7) // 8
        bits = np.unpackbits(
            np.frombuffer(_read_exact(f, nbytes, "mask bits"), dtype=np.uint8)
        )
    return bits[: K * m].reshape(K, m).astype(bool)


def save_interpolated(field: InterpolatedField, traj_path: Path, mask_path: Path, h: float) -> None:
    save_trajectory(Trajectory(states=field.states, step=h), traj_path)
    save_mask(field.mask, mask_path)

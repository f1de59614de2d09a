"""Spherical multi-index models: links, sampling, conditioning and file I/O."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import check_frame, complement, orthonormalize

log = logging.getLogger(__name__)

CHUNK = 1024
MAX_POLY_DEGREE = 4


# ---------------------------------------------------------------------------
# link specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkSpec:
    """Declarative description of the conditional law of y given W^T z.

    ``kind`` is one of ``parity``, ``mixture``, ``staircase``, ``gaussian``,
    ``directional``, ``polynomial`` or ``null``.  ``params`` holds the
    variant-specific settings as a sorted tuple of (key, value) pairs so the
    spec is hashable.
    """

    kind: str
    s: int
    sigma: float = 0.0
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in _LABELERS:
            raise ValueError(f"unknown link kind {self.kind!r}")
        if self.s < 1:
            raise ValueError("link index s must be >= 1")
        if self.sigma < 0:
            raise ValueError("noise level sigma must be >= 0")

    def param(self, key, default=None):
        return dict(self.params).get(key, default)

    @property
    def label_arity(self) -> int:
        return 2 if self.kind == "gaussian" else 1

    def to_dict(self) -> dict:
        return {"kind": self.kind, "s": self.s, "sigma": self.sigma,
                "params": {k: v for k, v in self.params}}

    @classmethod
    def from_dict(cls, spec: dict) -> "LinkSpec":
        params = spec.get("params", {})
        return cls(spec["kind"], int(spec["s"]), float(spec.get("sigma", 0.0)),
                   _freeze(params))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _freeze(params: dict) -> tuple:
    def conv(v):
        if isinstance(v, (list, tuple)):
            return tuple(conv(x) for x in v)
        return v
    return tuple(sorted((k, conv(v)) for k, v in params.items()))


def parity(s: int, sigma: float = 0.0) -> LinkSpec:
    """y = sign(prod_i <w_i, z>) + sigma * N(0, 1)."""
    return LinkSpec("parity", s, sigma)


def mixture_of_parities(k0: int, k1: int, k2: int, p: float, sigma: float = 0.0) -> LinkSpec:
    """Parity on k1 coordinates with probability p, else on k2 coordinates.

    The two groups overlap in k0 coordinates, so s = k1 + k2 - k0.
    """
    if not 0 < p < 0.5:
        raise ValueError("mixture weight p must lie in (0, 1/2)")
    if not 0 <= k0 < k1 < k2:
        raise ValueError("need 0 <= k0 < k1 < k2")
    return LinkSpec("mixture", k1 + k2 - k0, sigma,
                    _freeze({"k0": k0, "k1": k1, "k2": k2, "p": p}))


def staircase(terms=((0,), (0, 1, 2)), sigma: float = 0.0) -> LinkSpec:
    """y = sum over terms of sign(prod_{i in term} <w_i, z>) + noise."""
    terms = tuple(tuple(int(i) for i in t) for t in terms)
    s = 1 + max(max(t) for t in terms)
    return LinkSpec("staircase", s, sigma, _freeze({"terms": terms}))


def gaussian(link: str, s: int = 1, sigma: float = 0.0) -> LinkSpec:
    """Gaussian multi-index model in polar form; labels are (y_raw, r)."""
    if link not in GAUSSIAN_LINKS:
        raise ValueError(f"unknown Gaussian link {link!r}")
    return LinkSpec("gaussian", s, sigma, _freeze({"link": link}))


def directional(link: str, s: int = 1, sigma: float = 0.0) -> LinkSpec:
    """Gaussian model with the radial component dropped from the label."""
    if link not in GAUSSIAN_LINKS:
        raise ValueError(f"unknown Gaussian link {link!r}")
    return LinkSpec("directional", s, sigma, _freeze({"link": link}))


def polynomial(coeffs, sigma: float = 0.0) -> LinkSpec:
    """y = C_0 + sum_j <C_j, (sqrt(d) W^T z)^{(x)j}> + noise.

    ``coeffs[j]`` is an order-j array over R^s; ``coeffs[0]`` is a scalar.
    """
    coeffs = [np.asarray(c, dtype=float) for c in coeffs]
    if len(coeffs) - 1 > MAX_POLY_DEGREE:
        raise ValueError(f"polynomial degree exceeds cap {MAX_POLY_DEGREE}")
    s = next((c.shape[0] for c in coeffs if c.ndim), 1)
    return LinkSpec("polynomial", s, sigma, _freeze({"coeffs": [c.tolist() for c in coeffs]}))


def null(s: int = 1) -> LinkSpec:
    """Labels independent of z (standard Gaussian)."""
    return LinkSpec("null", s, 0.0)


# scalar and vector links for the Gaussian variants; X is (n, s), u uniform (n,)

def _k3_flip(t):
    # bounded odd function orthogonal to t under N(0,1): generative exponent 3
    beta = 0.6487
    return np.sign(t) * np.where(np.abs(t) < 1.0, 1.0, -beta)


def _k3_link(X, u):
    return np.where(u < 0.5 * (1 + _k3_flip(X[:, 0])), 1.0, -1.0)


GAUSSIAN_LINKS = {
    "linear": lambda X, u: X[:, 0],
    "he2": lambda X, u: (X[:, 0] ** 2 - 1) / math.sqrt(2),
    "he3": lambda X, u: (X[:, 0] ** 3 - 3 * X[:, 0]) / math.sqrt(6),
    "k3": _k3_link,
    "relu": lambda X, u: np.maximum(X[:, 0], 0.0),
    "abs": lambda X, u: np.abs(X[:, 0]),
    "product": lambda X, u: np.prod(X, axis=1),
    "sign_product": lambda X, u: np.sign(np.prod(X, axis=1)),
    "sum_sq": lambda X, u: (np.sum(X**2, axis=1) - X.shape[1]) / math.sqrt(2 * X.shape[1]),
}


# ---------------------------------------------------------------------------
# label generation from shared underlying draws
# ---------------------------------------------------------------------------

@dataclass
class Draws:
    """Underlying randomness for a block of samples."""

    G: np.ndarray        # (n, d) standard Gaussians, z = G / |G|
    r: np.ndarray        # (n,) chi_d radii
    aux: np.ndarray      # (n, 2) uniforms
    eps: np.ndarray      # (n,) standard normals

    @property
    def Z(self):
        return self.G / np.linalg.norm(self.G, axis=1, keepdims=True)


def _sign(x):
    # sign with ties broken to +1 so labels are always +-1
    return np.where(x >= 0, 1.0, -1.0)


def _parity_labels(link, P, dr, d):
    return _sign(np.prod(P, axis=1))


def _mixture_labels(link, P, dr, d):
    k0, k1, k2, p = (link.param(k) for k in ("k0", "k1", "k2", "p"))
    A = _sign(np.prod(P[:, :k1], axis=1))
    B = _sign(np.prod(P[:, k1 - k0:k1 - k0 + k2], axis=1))
    return np.where(dr.aux[:, 0] < p, A, B)


def _staircase_labels(link, P, dr, d):
    out = np.zeros(P.shape[0])
    for term in link.param("terms"):
        out += _sign(np.prod(P[:, list(term)], axis=1))
    return out


def _gaussian_raw(link, P, dr, d):
    X = dr.r[:, None] * P
    return GAUSSIAN_LINKS[link.param("link")](X, dr.aux[:, 1])


def _polynomial_labels(link, P, dr, d):
    coeffs = [np.asarray(c, dtype=float) for c in link.param("coeffs")]
    X = math.sqrt(d) * P
    out = np.full(P.shape[0], float(coeffs[0]))
    for j, C in enumerate(coeffs[1:], start=1):
        val = np.broadcast_to(C, (P.shape[0],) + C.shape)
        for _ in range(j):
            val = np.einsum("n...i,ni->n...", val, X)
        out += val
    return out


def _null_labels(link, P, dr, d):
    return np.zeros(P.shape[0])


_LABELERS = {
    "parity": _parity_labels,
    "mixture": _mixture_labels,
    "staircase": _staircase_labels,
    "gaussian": _gaussian_raw,
    "directional": _gaussian_raw,
    "polynomial": _polynomial_labels,
    "null": _null_labels,
}


def labels_from_draws(link: LinkSpec, W, draws: Draws) -> np.ndarray:
    """Labels (n, k) as a deterministic function of the frame and the draws."""
    W = np.asarray(W, dtype=float)
    W = W[:, None] if W.ndim == 1 else W
    if W.shape[1] != link.s:
        raise ValueError(f"frame rank {W.shape[1]} does not match link index s={link.s}")
    P = draws.Z @ W
    y = _LABELERS[link.kind](link, P, draws, W.shape[0])
    if link.kind == "null":
        y = draws.eps.copy()
    else:
        y = y + link.sigma * draws.eps
    if link.kind == "gaussian":
        return np.column_stack([y, draws.r])
    return y[:, None]


def _chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk,)))


def draw(d: int, n: int, seed: int) -> Draws:
    """Counter-based draws: chunk c of CHUNK samples depends only on (seed, c)."""
    parts = []
    for c in range(-(-n // CHUNK)):
        m = min(CHUNK, n - c * CHUNK)
        rng = _chunk_rng(seed, c)
        G = rng.standard_normal((m, d))
        r = np.sqrt(rng.gamma(d / 2, 2.0, size=m))
        aux = rng.random((m, 2))
        eps = rng.standard_normal(m)
        parts.append((G, r, aux, eps))
    if not parts:
        return Draws(np.zeros((0, d)), np.zeros(0), np.zeros((0, 2)), np.zeros(0))
    return Draws(*(np.concatenate(x) for x in zip(*parts)))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_sphere(d: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform draw(s) from S^{d-1}: normalized Gaussian vectors."""
    if d < 2:
        raise ValueError("need d >= 2")
    g = rng.standard_normal((1 if n is None else n, d))
    z = g / np.linalg.norm(g, axis=1, keepdims=True)
    return z[0] if n is None else z


def random_frame(d: int, s: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthonormal d x s frame."""
    if not 1 <= s <= d:
        raise ValueError(f"need 1 <= s <= d, got s={s}, d={d}")
    return orthonormalize(rng.standard_normal((d, s)))


def frame_hash(W) -> str:
    W = np.ascontiguousarray(np.asarray(W, dtype="<f8"))
    return hashlib.sha256(W.tobytes() + str(W.shape).encode()).hexdigest()[:16]


@dataclass
class Dataset:
    """n labeled samples: labels Y (n, k) and unit inputs Z (n, d)."""

    Y: np.ndarray
    Z: np.ndarray
    seed: int = 0
    link_hash: str = ""
    frame_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        self.Z = np.asarray(self.Z, dtype=float)
        if self.Z.ndim != 2 or self.Y.shape[0] != self.Z.shape[0]:
            raise ValueError("labels and inputs must have matching sample counts")

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    @property
    def label_arity(self) -> int:
        return self.Y.shape[1]

    def split(self, parts: int) -> list["Dataset"]:
        """Equal consecutive batches (fresh samples per estimation step)."""
        size = self.n // parts
        if size < 2:
            raise ValueError(f"cannot split {self.n} samples into {parts} batches")
        return [dataclasses.replace(self, Y=self.Y[i * size:(i + 1) * size],
                                    Z=self.Z[i * size:(i + 1) * size],
                                    meta={**self.meta, "batch": i})
                for i in range(parts)]

    def condition(self, U, U_perp=None) -> "Dataset":
        Y, Z, _ = condition(self.Y, self.Z, U, U_perp)
        return dataclasses.replace(self, Y=Y, Z=Z,
                                   meta={**self.meta, "conditioned_rank": np.shape(U)[1]})


def sample_mim(link: LinkSpec, W, n: int, seed: int) -> Dataset:
    """Draw n samples of the spherical MIM defined by ``link`` and frame ``W``.

    Each chunk of samples uses its own counter-derived stream so that the
    output depends only on (link, W, n, seed).
    """
    W = check_frame(W, tol=1e-10)
    if W.shape[1] != link.s:
        raise ValueError(f"frame rank {W.shape[1]} does not match link index s={link.s}")
    dr = draw(W.shape[0], n, seed)
    Y = labels_from_draws(link, W, dr)
    return Dataset(Y, dr.Z, seed=seed, link_hash=link.hash(), frame_hash=frame_hash(W))


def condition(Y, Z, U, U_perp=None):
    """Reduce samples given the directions in ``U``.

    Returns (Y_U, Z_U, keep) with Y_U = (y, U^T z) and Z_U the normalized
    projection onto the complement; samples lying inside span(U) are dropped.
    """
    Y = np.asarray(Y, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    U = np.asarray(U, dtype=float).reshape(Z.shape[1], -1)
    if U.shape[1] == 0:
        return Y.copy(), Z.copy(), np.ones(Z.shape[0], dtype=bool)
    if U_perp is None:
        U_perp = complement(U)
    if U.shape[1] + U_perp.shape[1] != Z.shape[1]:
        raise ValueError("U and U_perp must together span R^d")
    R = Z @ U
    res = Z @ U_perp
    nr = np.linalg.norm(res, axis=1)
    keep = nr >= 1e-12
    if not keep.all():
        log.warning("dropped %d samples lying inside span(U)", int((~keep).sum()))
    Zu = res[keep] / nr[keep, None]
    return np.hstack([Y[keep], R[keep]]), Zu, keep


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

MAGIC = b"SMIM"
_BIN_HEADER = struct.Struct("<4sIIQI16sQ")


def write_dataset(path, ds: Dataset, binary: bool = False) -> None:
    """Write the SMIM v1 text format (or the compact binary variant)."""
    if binary:
        with open(path, "wb") as fh:
            fh.write(_BIN_HEADER.pack(MAGIC, 1, ds.d, ds.n, ds.label_arity,
                                      ds.link_hash.encode().ljust(16, b"\0")[:16], ds.seed))
            fh.write(np.ascontiguousarray(np.hstack([ds.Y, ds.Z]), dtype="<f8").tobytes())
        return
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"SMIM v1; d={ds.d}; n={ds.n}; label_arity={ds.label_arity}; "
                 f"link={ds.link_hash or '-'}; seed={ds.seed}\n")
        for row in np.hstack([ds.Y, ds.Z]).tolist():
            fh.write(",".join(map(repr, row)) + "\n")


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        head = fh.read(5)
    # both variants start with the magic; text continues with " v1"
    if head[:4] == MAGIC and head[4:5] != b" ":
        return _read_binary(path)
    with open(path, encoding="ascii") as fh:
        header = fh.readline().strip()
        fields = _parse_header(header)
        d, n, k = int(fields["d"]), int(fields["n"]), int(fields["label_arity"])
        rows = np.loadtxt(fh, delimiter=",", ndmin=2) if n else np.zeros((0, d + k))
    if rows.shape != (n, d + k):
        raise ValueError(f"expected {n} rows of {d + k} values, got {rows.shape}")
    link = fields["link"]
    return Dataset(rows[:, :k], rows[:, k:], seed=int(fields["seed"]),
                   link_hash="" if link == "-" else link)


def _parse_header(header: str) -> dict:
    parts = [p.strip() for p in header.split(";")]
    if parts[0] != "SMIM v1":
        raise ValueError(f"not an SMIM v1 file: {header[:40]!r}")
    out = {}
    for p in parts[1:]:
        key, _, val = p.partition("=")
        out[key.strip()] = val.strip()
    missing = {"d", "n", "label_arity", "link", "seed"} - out.keys()
    if missing:
        raise ValueError(f"header lacks fields {sorted(missing)}")
    return out


def _read_binary(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, d, n, k, link, seed = _BIN_HEADER.unpack_from(raw)
    if version != 1:
        raise ValueError(f"unsupported binary version {version}")
    data = np.frombuffer(raw, dtype="<f8", offset=_BIN_HEADER.size)
    if data.size != n * (d + k):
        raise ValueError("binary payload has the wrong length")
    data = data.reshape(n, d + k).astype(float)
    return Dataset(data[:, :k], data[:, k:], seed=seed,
                   link_hash=link.rstrip(b"\0").decode())


def write_frame(path, W, label: str = "PLANTED frame, for evaluation only") -> None:
    W = np.asarray(W, dtype=float)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"SMIM-FRAME v1; d={W.shape[0]}; s={W.shape[1]}; {label}\n")
        for row in W.tolist():
            fh.write(",".join(map(repr, row)) + "\n")


def read_frame(path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        header = fh.readline()
        if not header.startswith("SMIM-FRAME v1"):
            raise ValueError("not an SMIM frame file")
        fields = dict(p.strip().split("=", 1) for p in header.split(";")[1:3])
        d, s = int(fields["d"]), int(fields["s"])
        W = np.loadtxt(fh, delimiter=",", ndmin=2) if s else np.zeros((d, 0))
    return W.reshape(d, s)

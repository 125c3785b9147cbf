"""Data plumbing: the embedding container, covariate tables and design
matrices, synthetic corpora, topic alignment, and the results writer.

Embeddings travel in a small binary container (text formats do not survive
six-figure image counts at D=768). Everything else is CSV/JSON with reals at
9 significant digits.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import re
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernel as K
from .model import GlobalParams, ModelSpec, _softmax_rows
from .util import ValidationError, fmt_real

# ----------------------------------------------------------- container
#
# layout (little-endian throughout):
#   magic "VSTM1" | version u16 | flags u8 (bit 0: id table) | N u64 | D u32
#   payload: N*D float32, row-major
#   if ids: (N+1) u64 offsets into a UTF-8 blob, then the blob

_MAGIC = b"VSTM1"
_HEADER = struct.Struct("<5sHBQI")
_VERSION = 1


@dataclass
class EmbeddingContainer:
    embeddings: np.ndarray  # (N, D) float32
    ids: tuple[str, ...] | None
    version: int = _VERSION


def _check_ids(ids, n: int) -> tuple[str, ...]:
    ids = tuple(str(s) for s in ids)
    if len(ids) != n:
        raise ValidationError(f"{len(ids)} ids for {n} rows")
    if len(set(ids)) != len(ids):
        raise ValidationError("image ids must be unique")
    return ids


def write_embeddings(path, embeddings: np.ndarray, ids=None) -> None:
    Z = np.ascontiguousarray(embeddings, dtype="<f4")
    if Z.ndim != 2:
        raise ValidationError("embeddings must be a 2-d array")
    n, d = Z.shape
    if ids is not None:
        ids = _check_ids(ids, n)
    buf = io.BytesIO()
    buf.write(_HEADER.pack(_MAGIC, _VERSION, 1 if ids is not None else 0, n, d))
    buf.write(Z.tobytes())
    if ids is not None:
        blob = b"".join(s.encode("utf-8") for s in ids)
        offsets = np.zeros(n + 1, dtype="<u8")
        np.cumsum([len(s.encode("utf-8")) for s in ids], out=offsets[1:])
        buf.write(offsets.tobytes())
        buf.write(blob)
    Path(path).write_bytes(buf.getvalue())


def read_embeddings(path) -> EmbeddingContainer:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError("file shorter than the container header")
    magic, version, flags, n, d = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValidationError("bad magic: not an embedding container")
    if version != _VERSION:
        raise ValidationError(f"unsupported container version {version}")
    pos = _HEADER.size
    payload = n * d * 4
    if len(raw) < pos + payload:
        raise ValidationError("truncated payload: length mismatch")
    Z = np.frombuffer(raw, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
    pos += payload
    ids = None
    if flags & 1:
        osize = (n + 1) * 8
        if len(raw) < pos + osize:
            raise ValidationError("truncated id offset table")
        offsets = np.frombuffer(raw, dtype="<u8", count=n + 1, offset=pos)
        pos += osize
        blob = raw[pos:]
        if offsets[0] != 0 or np.any(np.diff(offsets.astype(np.int64)) < 0):
            raise ValidationError("id offsets must start at 0 and be nondecreasing")
        if int(offsets[-1]) != len(blob):
            raise ValidationError("id blob length mismatch")
        ids = _check_ids(
            (blob[int(a) : int(b)].decode("utf-8") for a, b in zip(offsets, offsets[1:])), n
        )
        pos = len(raw)
    if pos != len(raw):
        raise ValidationError(f"{len(raw) - pos} trailing bytes after payload")
    return EmbeddingContainer(Z.copy(), ids, version)


def center_embeddings(data) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column-center the embeddings. Returns the centered matrix, the mean
    vector, and per-column standard deviations (the prototype prior scales);
    the data scale itself is left untouched."""
    Z = np.asarray(getattr(data, "embeddings", data), dtype=float)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValidationError("need at least two rows to center")
    mean = Z.mean(axis=0)
    sd = Z.std(axis=0)
    flat = sd < 1e-8
    if np.any(flat):
        warnings.warn(
            f"{int(flat.sum())} constant column(s); sd floored at 1e-8",
            UserWarning,
            stacklevel=2,
        )
        sd = np.where(flat, 1e-8, sd)
    return Z - mean, mean, sd


# ------------------------------------------------------ covariate table


@dataclass(frozen=True)
class CovariateTable:
    ids: tuple[str, ...] | None
    columns: dict[str, tuple[str, ...]]  # raw cell text, column-major
    kinds: dict[str, str]  # "numeric" | "categorical"

    @property
    def n(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def align_to(self, ids) -> "CovariateTable":
        """Reorder rows to match a container's id sequence."""
        if self.ids is None:
            raise ValidationError("covariate table has no id column to align on")
        where = {s: i for i, s in enumerate(self.ids)}
        try:
            order = [where[s] for s in ids]
        except KeyError as err:
            raise ValidationError(f"covariates missing id {err.args[0]!r}") from None
        return CovariateTable(
            tuple(ids),
            {name: tuple(vals[i] for i in order) for name, vals in self.columns.items()},
            dict(self.kinds),
        )


def _is_numeric_column(values) -> bool:
    try:
        for v in values:
            float(v)
    except ValueError:
        return False
    return len(values) > 0


def read_covariates(path, categorical=(), id_column: str = "id") -> CovariateTable:
    """CSV with a header row. A column is numeric iff every cell parses as a
    float; `categorical` forces names to stay categorical regardless. The
    id column, when present, is matched against container ids downstream."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ValidationError("covariate file has no header")
        rows = [r for r in reader if r]
    for lineno, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise ValidationError(f"line {lineno}: expected {len(header)} fields")
        for name, cell in zip(header, r):
            if cell == "":
                raise ValidationError(f"line {lineno}: empty cell in column {name!r}")
    unknown = set(categorical) - set(header)
    if unknown:
        raise ValidationError(f"categorical column(s) not in file: {sorted(unknown)}")
    cols = {name: tuple(r[j] for r in rows) for j, name in enumerate(header)}
    ids = None
    if id_column in cols:
        ids = cols.pop(id_column)
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate image ids in covariate file")
    kinds = {
        name: "numeric"
        if _is_numeric_column(vals) and name not in categorical
        else "categorical"
        for name, vals in cols.items()
    }
    return CovariateTable(ids, cols, kinds)


# ------------------------------------------------------- design matrix

_NAME_RE = re.compile(r"^\w+$")


def _parse_formula(formula: str, known) -> list[tuple[str, ...]]:
    """Expand '+' and '*' into a deduplicated list of product terms. 'a*b'
    means a + b + a:b; higher-order '*' expands every non-empty subset,
    smaller interactions first."""
    terms: list[tuple[str, ...]] = []
    seen = set()
    if not formula.strip():
        raise ValidationError("empty formula")
    for chunk in formula.split("+"):
        factors = [f.strip() for f in chunk.split("*")]
        if factors == ["1"]:
            continue  # intercept is always present anyway
        for f in factors:
            if not f or not _NAME_RE.match(f):
                raise ValidationError(f"bad formula near {chunk.strip()!r}")
            if f not in known:
                raise ValidationError(f"unknown column {f!r}")
        for size in range(1, len(factors) + 1):
            for combo in itertools.combinations(factors, size):
                if combo not in seen:
                    seen.add(combo)
                    terms.append(combo)
    return terms


@dataclass
class DesignEncoder:
    """Frozen dummy-coding scheme: intercept, first level of each categorical
    dropped, interactions as products. Serializable so prediction-time
    profiles encode against the training levels."""

    terms: list[tuple[str, ...]]
    kinds: dict[str, str]
    levels: dict[str, list[str]]

    @classmethod
    def fit(cls, table: CovariateTable, formula: str) -> "DesignEncoder":
        terms = _parse_formula(formula, set(table.columns))
        kinds = {}
        levels = {}
        for name in sorted({f for t in terms for f in t}):
            kinds[name] = table.kinds[name]
            if kinds[name] == "categorical":
                lv = sorted(set(table.columns[name]))
                if not lv:
                    raise ValidationError(f"column {name!r} has no levels")
                levels[name] = lv
        return cls(terms, kinds, levels)

    def _factor_block(self, table: CovariateTable, name: str):
        """(columns, names) for one factor: dummies past the first level for
        a categorical, the parsed values themselves for a numeric."""
        if name not in table.columns:
            raise ValidationError(f"covariates lack column {name!r}")
        vals = table.columns[name]
        if self.kinds[name] == "numeric":
            try:
                col = np.array([float(v) for v in vals])
            except ValueError:
                raise ValidationError(f"non-numeric value in column {name!r}") from None
            return [col], [name]
        lv = self.levels[name]
        index = {s: i for i, s in enumerate(lv)}
        codes = np.empty(len(vals), dtype=int)
        for i, v in enumerate(vals):
            if v not in index:
                raise ValidationError(f"unseen level {v!r} in column {name!r}")
            codes[i] = index[v]
        cols = [(codes == j).astype(float) for j in range(1, len(lv))]
        names = [f"{name}[{s}]" for s in lv[1:]]
        return cols, names

    def encode(self, table: CovariateTable) -> tuple[np.ndarray, list[str]]:
        n = table.n
        out = [np.ones(n)]
        names = ["(intercept)"]
        for term in self.terms:
            blocks = [self._factor_block(table, f) for f in term]
            sizes = [len(b[0]) for b in blocks]
            # first factor varies fastest, matching conventional layouts
            for rev in itertools.product(*[range(s) for s in reversed(sizes)]):
                idx = tuple(reversed(rev))
                col = np.ones(n)
                for (cols, _), j in zip(blocks, idx):
                    col = col * cols[j]
                out.append(col)
                names.append(":".join(b[1][j] for b, j in zip(blocks, idx)))
        return np.column_stack(out), names

    def to_dict(self) -> dict:
        return {
            "terms": [list(t) for t in self.terms],
            "kinds": dict(self.kinds),
            "levels": {k: list(v) for k, v in self.levels.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DesignEncoder":
        return cls(
            [tuple(t) for t in d["terms"]],
            dict(d["kinds"]),
            {k: list(v) for k, v in d["levels"].items()},
        )


def build_design_matrix(table: CovariateTable, formula: str, return_encoder: bool = False):
    enc = DesignEncoder.fit(table, formula)
    X, names = enc.encode(table)
    if return_encoder:
        return X, names, enc
    return X, names


# ------------------------------------------------------- synthetic data


@dataclass
class SyntheticTruth:
    globals_: GlobalParams
    zeta: np.ndarray
    theta: np.ndarray
    x: np.ndarray
    seed: tuple[int, int]


def _draw_prior_globals(spec: ModelSpec, gen: np.random.Generator) -> GlobalParams:
    m = spec.k - 1
    gamma = spec.sigma_gamma * gen.standard_t(spec.nu_gamma, size=(spec.p, m))
    beta = spec.sigma_beta * spec.sd_scale * gen.standard_t(spec.nu_beta, size=(spec.k, spec.d))
    sigma_theta = np.abs(gen.standard_normal(m))
    sigma_theta = np.maximum(sigma_theta, 1e-3)  # keep the covariance invertible
    chol_omega = K.sample_lkj_cholesky(m, spec.eta_theta, gen)
    return GlobalParams(beta, gamma, sigma_theta, chol_omega)


def synth_generate(
    spec: ModelSpec,
    n: int,
    rng: K.RngStream,
    x: np.ndarray | None = None,
    globals_: GlobalParams | None = None,
) -> tuple[np.ndarray, np.ndarray, SyntheticTruth]:
    """Forward-simulate a corpus: memberships from the prevalence regression,
    embeddings as the membership-weighted prototype mix plus unit noise.
    Globals come from their priors unless fixed values are passed."""
    if n < 1:
        raise ValidationError("n must be positive")
    if x is None:
        if spec.p != 1:
            raise ValidationError("p > 1 needs an explicit covariate matrix")
        x = np.ones((n, 1))
    x = np.asarray(x, dtype=float)
    if x.shape != (n, spec.p):
        raise ValidationError(f"x must be ({n}, {spec.p})")
    if globals_ is None:
        globals_ = _draw_prior_globals(spec, rng.child(0).generator())
    else:
        globals_.validate(spec)
    m = spec.k - 1
    scale_tri = globals_.sigma_theta[:, None] * globals_.chol_omega
    zeta = x @ globals_.gamma + rng.child(1).generator().standard_normal((n, m)) @ scale_tri.T
    theta = _softmax_rows(zeta)
    Z = theta @ globals_.beta + rng.child(2).generator().standard_normal((n, spec.d))
    return Z, x, SyntheticTruth(globals_, zeta, theta, x, (rng.seed, rng.stream))


# ----------------------------------------------------------- alignment


def align_topics(b_hat: np.ndarray, b_true: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Match estimated prototypes to reference prototypes by maximizing total
    cosine similarity (topic labels are arbitrary). Returns perm with
    b_hat[perm[k]] assigned to reference topic k, and the per-topic cosines."""
    from scipy.optimize import linear_sum_assignment

    b_hat = np.asarray(b_hat, dtype=float)
    b_true = np.asarray(b_true, dtype=float)
    if b_hat.shape != b_true.shape or b_hat.ndim != 2:
        raise ValidationError("prototype matrices must share (K, D)")
    for b in (b_hat, b_true):
        if np.any(np.linalg.norm(b, axis=1) == 0):
            raise ValidationError("zero-norm prototype row")
    u = b_hat / np.linalg.norm(b_hat, axis=1, keepdims=True)
    v = b_true / np.linalg.norm(b_true, axis=1, keepdims=True)
    cos = u @ v.T
    rows, cols = linear_sum_assignment(-cos)
    perm = np.empty(b_hat.shape[0], dtype=int)
    perm[cols] = rows
    return perm, cos[perm, np.arange(b_hat.shape[0])]


def realign_gamma(gamma: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Re-express prevalence coefficients after relabeling topics by perm.
    Coefficients are logit contrasts against the last topic, so relabeling is
    a basis change: append the implicit zero column, permute, re-reference."""
    gamma = np.asarray(gamma, dtype=float)
    perm = np.asarray(perm, dtype=int)
    k = gamma.shape[1] + 1
    if sorted(perm.tolist()) != list(range(k)):
        raise ValidationError("perm must be a permutation of range(K)")
    full = np.hstack([gamma, np.zeros((gamma.shape[0], 1))])
    shuffled = full[:, perm]
    return shuffled[:, :-1] - shuffled[:, -1:]


# -------------------------------------------------------- results writer


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _real_row(values) -> list[str]:
    return [fmt_real(v) for v in values]


def write_results(
    result,
    out_dir,
    ids=None,
    design_names=None,
    center=None,
    encoder: DesignEncoder | None = None,
    predictions=None,
    graph=None,
    pca=None,
    diagnostics=None,
) -> Path:
    """Persist a fit: delimited posterior summaries, optional prediction /
    graph / projection / diagnostics artifacts, and a manifest with digests
    of everything written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    theta = result.theta
    n, k = theta.shape
    m = k - 1
    if ids is not None:
        ids = _check_ids(ids, n)

    def with_id(i, cells):
        return ([ids[i]] if ids is not None else []) + cells

    id_head = ["id"] if ids is not None else []
    g = result.globals_

    _write_csv(
        out / "theta.csv",
        id_head + [f"topic_{j}" for j in range(k)],
        (with_id(i, _real_row(theta[i])) for i in range(n)),
    )
    _write_csv(
        out / "lambda_theta.csv",
        id_head + [f"lambda_{j}" for j in range(m)],
        (with_id(i, _real_row(result.lambda_theta[i])) for i in range(n)),
    )
    _write_csv(
        out / "beta.csv",
        ["topic"] + [f"dim_{j}" for j in range(g.beta.shape[1])],
        ([str(i)] + _real_row(g.beta[i]) for i in range(k)),
    )
    gamma_names = design_names if design_names is not None else [
        f"x{i}" for i in range(g.gamma.shape[0])
    ]
    if len(gamma_names) != g.gamma.shape[0]:
        raise ValidationError("design_names length disagrees with gamma rows")
    _write_csv(
        out / "gamma.csv",
        ["covariate"] + [f"topic_{j}" for j in range(m)],
        ([gamma_names[i]] + _real_row(g.gamma[i]) for i in range(g.gamma.shape[0])),
    )
    omega = g.chol_omega @ g.chol_omega.T
    _write_csv(
        out / "omega.csv",
        ["topic"] + [f"topic_{j}" for j in range(m)],
        ([str(i)] + _real_row(omega[i]) for i in range(m)),
    )
    _write_csv(
        out / "sigma_theta.csv",
        ["topic", "sigma_theta"],
        ([str(i), fmt_real(g.sigma_theta[i])] for i in range(m)),
    )
    every = int(result.manifest.get("config", {}).get("elbo_eval_every", 1))
    _write_csv(
        out / "elbo_trace.csv",
        ["step", "elbo"],
        ([str((i + 1) * every), fmt_real(v)] for i, v in enumerate(result.elbo_trace)),
    )
    if center is not None:
        mean, sd_scale = center
        _write_csv(
            out / "center.csv",
            ["dim", "mean", "sd_scale"],
            ([str(i), fmt_real(mean[i]), fmt_real(sd_scale[i])] for i in range(len(mean))),
        )
    if predictions is not None:
        _write_csv(
            out / "predictions.csv",
            ["profile", "topic", "mean", "mc_se"],
            (
                [p.profile, str(j), fmt_real(p.mean[j]), fmt_real(p.mc_se[j])]
                for p in predictions
                for j in range(len(p.mean))
            ),
        )
    if graph is not None:
        (out / "graph.json").write_text(
            json.dumps(
                {
                    "nodes": list(graph.nodes),
                    "labels": list(graph.labels),
                    "edges": [[int(i), int(j), float(w)] for i, j, w in graph.edges],
                    "communities": list(graph.communities),
                },
                indent=2,
            )
            + "\n"
        )
    if pca is not None:
        scores, loadings, share = pca
        _write_csv(
            out / "pca.csv",
            id_head + ["score"],
            (with_id(i, [fmt_real(scores[i])]) for i in range(len(scores))),
        )
        _write_csv(
            out / "pca_loadings.csv",
            ["coordinate", "loading"],
            ([f"lambda_{i}", fmt_real(loadings[i])] for i in range(len(loadings))),
        )
    if diagnostics is not None:
        (out / "diagnostics.json").write_text(json.dumps(diagnostics, indent=2) + "\n")

    manifest = dict(result.manifest)
    if design_names is not None:
        manifest["design_names"] = list(design_names)
    if encoder is not None:
        manifest["encoder"] = encoder.to_dict()
    if pca is not None:
        manifest["pca_variance_share"] = float(pca[2])
    manifest["artifacts"] = {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(out.iterdir())
        if p.name != "manifest.json" and p.is_file() and p.suffix in (".csv", ".json")
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath

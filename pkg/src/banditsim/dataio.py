"""Persistence: BSIM1 checkpoints, impression logs, reports, catalog CSVs and
run-directory manifests. All round-trips are lossless; parameter blocks carry
checksums and text floats use shortest round-trip decimals."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import Catalog
from .errors import IntegrityError, ParseError, UsageError, VersionMismatchError
from .metrics import MetricsReport
from .nncore import NetworkConfig, NetworkParams

logger = logging.getLogger(__name__)

MAGIC = b"BSIM1"

IMPRESSION_FIELDS = ("round", "user_id", "ad_id", "served_score", "point_score",
                     "label", "policy_tag", "impression_id", "run_id")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------- checkpoints


def _encode_network(params: NetworkParams) -> bytes:
    arrays = params.param_arrays()
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    header = {
        "kind": "network",
        "config": params.config.to_dict(),
        "step_count": params.step_count,
        "shapes": [list(a.shape) for a in arrays],
        "param_sha256": _sha256(blob),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + blob


def _read_envelope(data: bytes, source: str) -> tuple[dict, bytes]:
    if len(data) < len(MAGIC) + 4:
        raise IntegrityError(f"{source}: truncated checkpoint")
    magic = data[: len(MAGIC)]
    if magic != MAGIC:
        if magic[:4] == MAGIC[:4]:
            raise VersionMismatchError(
                f"{source}: format version {magic.decode('ascii', 'replace')!r} "
                f"is not supported (expected {MAGIC.decode('ascii')!r})"
            )
        raise IntegrityError(f"{source}: not a banditsim checkpoint")
    (header_len,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if len(data) < start + header_len:
        raise IntegrityError(f"{source}: truncated checkpoint header")
    try:
        header = json.loads(data[start:start + header_len])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: bad checkpoint header: {exc}") from None
    return header, data[start + header_len:]


def _decode_network(data: bytes, source: str) -> NetworkParams:
    header, blob = _read_envelope(data, source)
    if header.get("kind") != "network":
        raise IntegrityError(f"{source}: expected a network checkpoint, got {header.get('kind')!r}")
    shapes = [tuple(s) for s in header["shapes"]]
    total = sum(int(np.prod(s)) for s in shapes) * 8
    if len(blob) < total:
        raise IntegrityError(f"{source}: parameter block truncated ({len(blob)} < {total} bytes)")
    blob = blob[:total]
    if _sha256(blob) != header["param_sha256"]:
        raise IntegrityError(f"{source}: parameter block checksum mismatch")
    config = NetworkConfig.from_dict(header["config"])
    arrays = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
                      .astype(np.float64).reshape(shape))
        offset += count * 8
    n_hidden = len(config.layer_sizes)
    params = NetworkParams(
        config=config,
        weights=[arrays[2 * k] for k in range(n_hidden)],
        biases=[arrays[2 * k + 1] for k in range(n_hidden)],
        head_weights=arrays[2 * n_hidden],
        head_bias=arrays[2 * n_hidden + 1],
        step_count=int(header["step_count"]),
    )
    params.validate_shapes()
    return params


def save_network_checkpoint(params: NetworkParams, path) -> None:
    Path(path).write_bytes(_encode_network(params))


def load_network_checkpoint(path) -> NetworkParams:
    return _decode_network(Path(path).read_bytes(), str(path))


def save_checkpoint(sampler, path) -> None:
    """Single-file sampler container: SamplerConfig plus the member networks
    concatenated behind a length-prefixed index."""
    blobs = [_encode_network(m) for m in sampler.members]
    header = {
        "kind": "sampler",
        "sampler_config": sampler.config.to_dict(),
        "member_lengths": [len(b) for b in blobs],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(blobs))


def load_checkpoint(path):
    """Rebuild a Sampler from a container file (point predictions resume
    exactly; rng streams and optimizer accumulators start fresh)."""
    from .posterior import Sampler, SamplerConfig

    source = str(path)
    header, rest = _read_envelope(Path(path).read_bytes(), source)
    if header.get("kind") != "sampler":
        raise IntegrityError(f"{source}: expected a sampler checkpoint, got {header.get('kind')!r}")
    config = SamplerConfig.from_dict(header["sampler_config"])
    members = []
    offset = 0
    for i, length in enumerate(header["member_lengths"]):
        chunk = rest[offset:offset + length]
        if len(chunk) < length:
            raise IntegrityError(f"{source}: member {i} truncated")
        members.append(_decode_network(chunk, f"{source}[member {i}]"))
        offset += length
    if len(members) != config.network_count():
        raise IntegrityError(
            f"{source}: {len(members)} member networks for a config expecting "
            f"{config.network_count()}"
        )
    return Sampler(config, members)


# ---------------------------------------------------------------- impressions


def impression_line(imp) -> str:
    return json.dumps([getattr(imp, name) for name in IMPRESSION_FIELDS])


def write_impressions(impressions, path) -> None:
    """One self-delimiting JSON array per line, fields in declared order."""
    with open(path, "w", encoding="utf-8") as fh:
        for imp in impressions:
            fh.write(impression_line(imp) + "\n")


def append_impressions(impressions, path) -> None:
    """Append records and flush; the log file is append-only during a run."""
    with open(path, "a", encoding="utf-8") as fh:
        for imp in impressions:
            fh.write(impression_line(imp) + "\n")
        fh.flush()


def read_impressions(path):
    from .loop import Impression

    out = []
    last_id = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not isinstance(record, list) or len(record) != len(IMPRESSION_FIELDS):
                raise ParseError(
                    f"{path}:{lineno}: expected {len(IMPRESSION_FIELDS)} fields, "
                    f"got {len(record) if isinstance(record, list) else type(record).__name__}"
                )
            imp = Impression(
                round=int(record[0]),
                user_id=str(record[1]),
                ad_id=str(record[2]),
                served_score=float(record[3]),
                point_score=float(record[4]),
                label=int(record[5]),
                policy_tag=str(record[6]),
                impression_id=int(record[7]),
                run_id=str(record[8]),
            )
            if imp.label not in (0, 1):
                raise ParseError(f"{path}:{lineno}: label must be 0/1, got {imp.label}")
            if last_id is not None and imp.impression_id <= last_id:
                raise IntegrityError(
                    f"{path}:{lineno}: impression_id {imp.impression_id} not increasing"
                )
            last_id = imp.impression_id
            out.append(imp)
    return out


# ---------------------------------------------------------------- config digest


def canonical_config_digest(config) -> str:
    """sha256 of the key-sorted canonical JSON serialization."""
    if hasattr(config, "to_canonical_dict"):
        config = config.to_canonical_dict()
    elif hasattr(config, "to_dict"):
        config = config.to_dict()
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return _sha256(text.encode("utf-8"))


# ---------------------------------------------------------------- reports


def write_report(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def read_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_series(report: MetricsReport, path) -> None:
    regret = report.regret_series
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("round,cumulative_ctr,regret\n")
        for i, ctr in enumerate(report.ctr_series):
            r = repr(float(regret[i])) if regret is not None else ""
            fh.write(f"{i + 1},{float(ctr)!r},{r}\n")


# ---------------------------------------------------------------- catalogs


def write_catalog_csvs(catalog: Catalog, out_dir) -> list[Path]:
    """users.csv / ads.csv / labels.csv (+ ground_truth.csv when known).

    Labels serialize as 5-star / 1-star ratings so the default threshold 4
    reproduces the binary matrix on load.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def feature_header(names, width):
        if len(names) == width and all(n.startswith(("n_", "c_")) for n in names):
            return names
        return [f"n_f{j}" for j in range(width)]

    for fname, ids, feats, names, id_col in (
        ("users.csv", catalog.user_ids, catalog.user_features, catalog.user_feature_names, "user_id"),
        ("ads.csv", catalog.ad_ids, catalog.ad_features, catalog.ad_feature_names, "ad_id"),
    ):
        path = out / fname
        cols = feature_header(names, feats.shape[1])
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join([id_col] + cols) + "\n")
            for i, ident in enumerate(ids):
                fh.write(",".join([ident] + [repr(float(v)) for v in feats[i]]) + "\n")
        written.append(path)

    labels_path = out / "labels.csv"
    with open(labels_path, "w", encoding="utf-8") as fh:
        fh.write("user_id,ad_id,rating\n")
        for u, uid in enumerate(catalog.user_ids):
            for a, aid in enumerate(catalog.ad_ids):
                fh.write(f"{uid},{aid},{5 if catalog.labels[u, a] else 1}\n")
    written.append(labels_path)

    if catalog.ground_truth_ctr is not None:
        gt_path = out / "ground_truth.csv"
        with open(gt_path, "w", encoding="utf-8") as fh:
            fh.write("user_id,ad_id,ctr\n")
            for u, uid in enumerate(catalog.user_ids):
                for a, aid in enumerate(catalog.ad_ids):
                    fh.write(f"{uid},{aid},{repr(float(catalog.ground_truth_ctr[u, a]))}\n")
        written.append(gt_path)
    return written


# ---------------------------------------------------------------- run artifacts


@dataclass
class RunArtifacts:
    run_dir: Path
    config_digest: str
    manifest: dict[str, dict] = field(default_factory=dict)


def prepare_run_dir(path, force: bool = False) -> Path:
    """Create a run directory, refusing to reuse a nonempty one without force."""
    run_dir = Path(path)
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise UsageError(f"{run_dir} already exists and is not empty (use force/--force)")
        logger.info("overwriting existing run directory %s", run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def write_manifest(run_dir, config_digest: str) -> RunArtifacts:
    run_dir = Path(run_dir)
    manifest: dict[str, dict] = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            data = p.read_bytes()
            manifest[str(p.relative_to(run_dir))] = {"size": len(data), "sha256": _sha256(data)}
    payload = {"config_digest": config_digest, "files": manifest}
    (run_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return RunArtifacts(run_dir=run_dir, config_digest=config_digest, manifest=manifest)


def verify_manifest(run_dir) -> bool:
    run_dir = Path(run_dir)
    payload = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    for rel, entry in payload["files"].items():
        p = run_dir / rel
        if not p.is_file():
            raise IntegrityError(f"{run_dir}: manifest file {rel} missing")
        data = p.read_bytes()
        if len(data) != entry["size"] or _sha256(data) != entry["sha256"]:
            raise IntegrityError(f"{run_dir}: manifest checksum mismatch for {rel}")
    return True

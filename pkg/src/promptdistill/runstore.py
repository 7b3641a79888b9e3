"""Run persistence and provenance.

Every run lives in one directory:

    <run_root>/<run_id>/
        manifest.json        phase status, artifact paths, content digests
        config.json          the effective pipeline configuration
        phases/<phase>/...   one subdirectory per phase, artifacts inside
        cache/<role>/...     response caches for the offline roles
        .lock                present while a writer owns the run

Artifacts are content-addressed: the manifest records a sha256 per artifact
and a phase only counts as complete while every one of its artifacts verifies.
``resume`` recomputes digests and downgrades any phase whose artifacts drifted
- plus everything downstream of it - back to pending, so a run can always be
continued or audited from disk alone. Timestamps never participate in any
digest.
"""

from __future__ import annotations

import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from .clustering import ClusteringParams
from .corpus import Dataset, TaskSchema
from .errors import ConfigError, CorruptManifest, IoError, RunExists, RunLockHeld
from .evaluation import FEW_SHOT, ZERO_SHOT
from .gateway import BackendConfig, CHAT_ROLES
from .resolution import ResolutionConfig
from .templates import template_exists
from .util import atomic_write_json, digest_of, sha256_file, utc_now_iso

logger = logging.getLogger("promptdistill.runstore")

PHASES = ("extract", "cluster", "synthesize", "resolve", "evaluate")
PENDING = "pending"
COMPLETE = "complete"
FAILED = "failed"

ROLES = CHAT_ROLES + ("embedder",)
CACHED_ROLES = ("teacher", "synthesizer", "resolver")  # idempotent offline phases
BASELINE_REGIMES = (ZERO_SHOT, FEW_SHOT)

TEMPLATE_PHASES = ("extraction", "synthesis", "resolution", "system", "few_shot")


@dataclass
class EvalDefaults:
    regimes: tuple[str, ...] = ()
    k_shots: int = 5
    split: str = "test"

    def __post_init__(self):
        for regime in self.regimes:
            if regime not in BASELINE_REGIMES:
                raise ConfigError(f"unknown baseline regime {regime!r}")
        if self.k_shots < 1:
            raise ConfigError("k_shots must be >= 1")
        if self.split not in ("validation", "test"):
            raise ConfigError("evaluation split must be validation or test")


@dataclass
class Limits:
    extraction_limit: int | None = None
    train_eval_cap: int = 1000
    extraction_failure_ceiling: float = 0.2

    def __post_init__(self):
        if self.extraction_limit is not None and self.extraction_limit < 1:
            raise ConfigError("extraction_limit must be >= 1 when set")
        if self.train_eval_cap < 1:
            raise ConfigError("train_eval_cap must be >= 1")
        if not (0.0 <= self.extraction_failure_ceiling <= 1.0):
            raise ConfigError("extraction_failure_ceiling must lie in [0, 1]")


@dataclass
class PipelineConfig:
    task: TaskSchema
    backends: dict[str, BackendConfig]
    clustering: ClusteringParams = field(default_factory=ClusteringParams)
    resolution: ResolutionConfig = field(default_factory=ResolutionConfig)
    evaluation: EvalDefaults = field(default_factory=EvalDefaults)
    limits: Limits = field(default_factory=Limits)
    template_dir: str | None = None
    seed: int = 0
    run_root: str = "runs"

    def validate(self) -> None:
        missing_roles = [r for r in ROLES if r not in self.backends]
        if missing_roles:
            raise ConfigError(f"backends missing for roles: {missing_roles}")
        for role, backend in self.backends.items():
            if role not in ROLES:
                raise ConfigError(f"unknown backend role {role!r}")
            backend.validate()
        for phase in TEMPLATE_PHASES:
            template_id = self.task.prompt_template_ids.get(phase)
            if not template_id:
                raise ConfigError(f"task declares no template for phase {phase!r}")
            if not template_exists(template_id, self.template_dir):
                raise ConfigError(f"template {template_id!r} (phase {phase!r}) not found")

    def template_id(self, phase: str) -> str:
        return self.task.prompt_template_ids[phase]

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "backends": {role: b.to_dict() for role, b in sorted(self.backends.items())},
            "clustering": {
                "epsilon": self.clustering.epsilon,
                "min_samples": self.clustering.min_samples,
            },
            "resolution": {
                "max_rounds": self.resolution.max_rounds,
                "min_improvement": self.resolution.min_improvement,
                "n_failures": self.resolution.n_failures,
                "n_successes": self.resolution.n_successes,
                "seed": self.resolution.seed,
            },
            "evaluation": {
                "regimes": list(self.evaluation.regimes),
                "k_shots": self.evaluation.k_shots,
                "split": self.evaluation.split,
            },
            "limits": {
                "extraction_limit": self.limits.extraction_limit,
                "train_eval_cap": self.limits.train_eval_cap,
                "extraction_failure_ceiling": self.limits.extraction_failure_ceiling,
            },
            "template_dir": self.template_dir,
            "seed": self.seed,
            "run_root": self.run_root,
        }

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        clustering = d.get("clustering") or {}
        resolution = d.get("resolution") or {}
        evaluation = d.get("evaluation") or {}
        limits = d.get("limits") or {}
        return PipelineConfig(
            task=TaskSchema.from_dict(d["task"]),
            backends={
                role: BackendConfig.from_dict(b) for role, b in (d.get("backends") or {}).items()
            },
            clustering=ClusteringParams(
                epsilon=float(clustering.get("epsilon", 0.4)),
                min_samples=int(clustering.get("min_samples", 6)),
            ),
            resolution=ResolutionConfig(
                max_rounds=int(resolution.get("max_rounds", 5)),
                min_improvement=float(resolution.get("min_improvement", 0.005)),
                n_failures=int(resolution.get("n_failures", 20)),
                n_successes=int(resolution.get("n_successes", 10)),
                seed=int(resolution.get("seed", d.get("seed", 0))),
            ),
            evaluation=EvalDefaults(
                regimes=tuple(evaluation.get("regimes") or ()),
                k_shots=int(evaluation.get("k_shots", 5)),
                split=str(evaluation.get("split", "test")),
            ),
            limits=Limits(
                extraction_limit=limits.get("extraction_limit"),
                train_eval_cap=int(limits.get("train_eval_cap", 1000)),
                extraction_failure_ceiling=float(limits.get("extraction_failure_ceiling", 0.2)),
            ),
            template_dir=d.get("template_dir"),
            seed=int(d.get("seed", 0)),
            run_root=str(d.get("run_root", "runs")),
        )

    def digest(self) -> str:
        """Identity of the experiment: everything that can change results.
        The storage location (run_root) deliberately stays out."""
        d = self.to_dict()
        d.pop("run_root", None)
        return digest_of(d)


def load_config_file(path: Path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    try:
        return PipelineConfig.from_dict(raw)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"config {path} is malformed: {e}") from e


@dataclass
class RunManifest:
    run_id: str
    task_id: str
    dataset_path: str
    dataset_digest: str
    config_digest: str
    created_at: str
    phase_status: dict[str, str]
    phase_artifacts: dict[str, list[str]]
    artifact_paths: dict[str, str]
    artifact_digests: dict[str, str]

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "task_id": self.task_id,
            "dataset_path": self.dataset_path,
            "dataset_digest": self.dataset_digest,
            "config_digest": self.config_digest,
            "created_at": self.created_at,
            "phase_status": self.phase_status,
            "phase_artifacts": self.phase_artifacts,
            "artifact_paths": self.artifact_paths,
            "artifact_digests": self.artifact_digests,
        }

    @staticmethod
    def from_dict(d: dict) -> "RunManifest":
        try:
            return RunManifest(
                run_id=str(d["run_id"]),
                task_id=str(d["task_id"]),
                dataset_path=str(d["dataset_path"]),
                dataset_digest=str(d["dataset_digest"]),
                config_digest=str(d["config_digest"]),
                created_at=str(d["created_at"]),
                phase_status=dict(d["phase_status"]),
                phase_artifacts={k: list(v) for k, v in d["phase_artifacts"].items()},
                artifact_paths=dict(d["artifact_paths"]),
                artifact_digests=dict(d["artifact_digests"]),
            )
        except (KeyError, TypeError) as e:
            raise CorruptManifest(f"manifest missing field: {e}") from e


def run_dir(run_root: Path | str, run_id: str) -> Path:
    return Path(run_root) / run_id


def manifest_path(run_root: Path | str, run_id: str) -> Path:
    return run_dir(run_root, run_id) / "manifest.json"


def save_manifest(run_root: Path | str, manifest: RunManifest) -> None:
    atomic_write_json(manifest_path(run_root, manifest.run_id), manifest.to_dict())


def load_manifest(run_root: Path | str, run_id: str) -> RunManifest:
    path = manifest_path(run_root, run_id)
    if not path.is_file():
        raise CorruptManifest(f"no manifest at {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorruptManifest(f"manifest {path} is not valid JSON: {e}") from e
    return RunManifest.from_dict(raw)


def derive_run_id(config: PipelineConfig, dataset: Dataset) -> str:
    """Content-addressed default: same task + dataset + config always lands in
    the same run directory, which is what makes reruns resumable for free."""
    return f"{config.task.task_id}-{dataset.source_digest[:8]}-{config.digest()[:8]}"


def init_run(
    config: PipelineConfig,
    dataset: Dataset,
    dataset_path: Path | str,
    run_root: Path | str | None = None,
    run_id: str | None = None,
) -> RunManifest:
    """Create the run directory with all phases pending.

    Config validation happens before anything touches the filesystem; an
    invalid config must not leave a half-born run behind.
    """
    config.validate()
    root = Path(run_root if run_root is not None else config.run_root)
    rid = run_id or derive_run_id(config, dataset)
    directory = run_dir(root, rid)
    if directory.exists():
        raise RunExists(rid)
    try:
        (directory / "phases").mkdir(parents=True)
    except OSError as e:
        raise IoError(f"cannot create run directory {directory}: {e}") from e
    atomic_write_json(directory / "config.json", config.to_dict())
    manifest = RunManifest(
        run_id=rid,
        task_id=config.task.task_id,
        dataset_path=str(Path(dataset_path).resolve()),
        dataset_digest=dataset.source_digest,
        config_digest=config.digest(),
        created_at=utc_now_iso(),
        phase_status={phase: PENDING for phase in PHASES},
        phase_artifacts={phase: [] for phase in PHASES},
        artifact_paths={},
        artifact_digests={},
    )
    save_manifest(root, manifest)
    return manifest


def mark_phase_complete(
    run_root: Path | str,
    manifest: RunManifest,
    phase: str,
    artifacts: dict[str, Path | str],
) -> None:
    """Register a phase's artifacts (paths relative to the run directory),
    digest them, and flip the phase to complete."""
    directory = run_dir(run_root, manifest.run_id)
    kinds = []
    for kind, rel in artifacts.items():
        rel = str(rel)
        path = directory / rel
        if not path.is_file():
            raise IoError(f"artifact {kind!r} missing at {path}")
        manifest.artifact_paths[kind] = rel
        manifest.artifact_digests[kind] = sha256_file(path)
        kinds.append(kind)
    manifest.phase_artifacts[phase] = sorted(set(manifest.phase_artifacts.get(phase, []) + kinds))
    manifest.phase_status[phase] = COMPLETE
    save_manifest(run_root, manifest)


def mark_phase_failed(run_root: Path | str, manifest: RunManifest, phase: str) -> None:
    manifest.phase_status[phase] = FAILED
    save_manifest(run_root, manifest)


def _phase_artifacts_verify(directory: Path, manifest: RunManifest, phase: str) -> bool:
    kinds = manifest.phase_artifacts.get(phase, [])
    if manifest.phase_status.get(phase) == COMPLETE and not kinds:
        return False
    for kind in kinds:
        rel = manifest.artifact_paths.get(kind)
        if rel is None:
            return False
        path = directory / rel
        if not path.is_file():
            return False
        if sha256_file(path) != manifest.artifact_digests.get(kind):
            return False
    return True


def resume(run_root: Path | str, run_id: str) -> tuple[RunManifest, list[str]]:
    """Reload a manifest and re-verify it against the directory contents.

    Returns (manifest, warnings). Phases whose artifacts verify stay complete;
    a mismatch downgrades that phase and its whole downstream closure to
    pending. A changed dataset file invalidates everything.
    """
    manifest = load_manifest(run_root, run_id)
    directory = run_dir(run_root, run_id)
    warnings: list[str] = []

    dataset_file = Path(manifest.dataset_path)
    if not dataset_file.is_file() or sha256_file(dataset_file) != manifest.dataset_digest:
        warnings.append("dataset file changed or missing; all phases downgraded to pending")
        for phase in PHASES:
            manifest.phase_status[phase] = PENDING
        save_manifest(run_root, manifest)
        return manifest, warnings

    downgrade_from: int | None = None
    for i, phase in enumerate(PHASES):
        status = manifest.phase_status.get(phase, PENDING)
        if status == FAILED:
            manifest.phase_status[phase] = PENDING
            warnings.append(f"phase {phase!r} previously failed; reset to pending")
            downgrade_from = i if downgrade_from is None else downgrade_from
            continue
        if status != COMPLETE:
            continue
        if not _phase_artifacts_verify(directory, manifest, phase):
            warnings.append(f"phase {phase!r} artifacts missing or modified; downgraded")
            downgrade_from = i if downgrade_from is None else downgrade_from
    if downgrade_from is not None:
        for phase in PHASES[downgrade_from:]:
            manifest.phase_status[phase] = PENDING
    save_manifest(run_root, manifest)
    return manifest, warnings


def upstream_incomplete(manifest: RunManifest, phase: str) -> list[str]:
    """Phases earlier in the DAG that are not complete."""
    i = PHASES.index(phase)
    return [p for p in PHASES[:i] if manifest.phase_status.get(p) != COMPLETE]


@contextmanager
def run_lock(run_root: Path | str, run_id: str):
    """One writer per run directory; concurrent readers need no lock."""
    lock = run_dir(run_root, run_id) / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockHeld(run_id) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        try:
            lock.unlink()
        except OSError:  # pragma: no cover - best-effort cleanup
            pass

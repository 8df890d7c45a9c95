from flask import Config
import dataclasses
from dataclasses import dataclass, replace
import typing as t
import os
import json
import time
import logging
import numpy as np
from .scene import dump_scene
from .presets import load_scene_ref, PRESET_PREFIX
from .geom2d import build_accel
from .field import FieldConfig, GuidingField
from .training import GuideRecords, TrainStats, training_active, SELECTION_FRACTION
from .walker import StepContext, WalkConfig, WalkStats, solve_batch
from .walker import RR_DEPTH, MAX_DEPTH, CHUNK_SIZE
from .sampler import SamplerBase, load_sampler
from .image import (
    SolutionImage,
    eval_grid,
    compute_relmse,
    relmse_delta,
    write_field_output,
    read_field_output,
    OUTPUT_FORMATS,
)
from .utils import write_rows, write_json, hash_file
from .errors import WostError, ConfigError


__all__ = ["Solver", "RunConfig", "RunResult", "load_config", "SamplerBase", "WostError"]


ENV_PREFIX = "WOST"
TRAIN_STREAM = 1 << 32
ANALYTIC_REFERENCE = "analytic"


@dataclass
class RunConfig:
    scene: str
    wpp: int = 256
    sampler: t.Union[str, t.Type[SamplerBase], SamplerBase] = "learnable_mis"
    fixed_c: float = 0.5
    train_until: int = 256
    k: int = 8
    seed: int = 0
    resolution: t.Tuple[int, int] = (64, 64)
    eval_bbox: t.Optional[t.Sequence[t.Sequence[float]]] = None
    out: t.Optional[str] = None
    field_levels: int = 4
    field_resolutions: t.Sequence[int] = (16, 32, 64, 128)
    field_features: int = 4
    field_hidden: int = 64
    learning_rate: float = 1e-2
    minibatch: int = 16384
    selection_fraction: float = SELECTION_FRACTION
    reflection: bool = True
    rr_depth: int = RR_DEPTH
    max_depth: int = MAX_DEPTH
    r_min: t.Optional[float] = None
    t_epsilon: t.Optional[float] = None
    grazing_clamp: t.Optional[float] = None
    chunk_size: int = CHUNK_SIZE
    threads: int = 1
    reference: t.Optional[str] = None
    relmse_bbox: t.Optional[t.Sequence[t.Sequence[float]]] = None
    checkpoint: t.Optional[str] = None
    record_dump: t.Optional[str] = None
    log_every: int = 1
    root_path: str = "."

    @classmethod
    def from_mapping(cls, config, root_path=None, **overrides):
        """Build from an UPPERCASE mapping (a :class:`flask.Config`); keyword overrides that
        are not None win over the mapping."""
        root_path = root_path or getattr(config, "root_path", None) or "."
        values = dict(
            scene=config.get("SCENE"),
            wpp=config.get("WPP", cls.wpp),
            sampler=config.get("SAMPLER", cls.sampler),
            fixed_c=config.get("FIXED_C", cls.fixed_c),
            train_until=config.get("TRAIN_UNTIL", cls.train_until),
            k=config.get("K", cls.k),
            seed=config.get("SEED", cls.seed),
            resolution=config.get("RESOLUTION", cls.resolution),
            eval_bbox=config.get("EVAL_BBOX"),
            out=config.get("OUT"),
            field_levels=config.get("FIELD_LEVELS", cls.field_levels),
            field_resolutions=config.get("FIELD_RESOLUTIONS", cls.field_resolutions),
            field_features=config.get("FIELD_FEATURES", cls.field_features),
            field_hidden=config.get("FIELD_HIDDEN", cls.field_hidden),
            learning_rate=config.get("LEARNING_RATE", cls.learning_rate),
            minibatch=config.get("MINIBATCH", cls.minibatch),
            selection_fraction=config.get("SELECTION_FRACTION", cls.selection_fraction),
            reflection=config.get("REFLECTION", cls.reflection),
            rr_depth=config.get("RR_DEPTH", cls.rr_depth),
            max_depth=config.get("MAX_DEPTH", cls.max_depth),
            r_min=config.get("R_MIN"),
            t_epsilon=config.get("T_EPSILON"),
            grazing_clamp=config.get("GRAZING_CLAMP"),
            chunk_size=config.get("CHUNK_SIZE", cls.chunk_size),
            threads=config.get("THREADS", cls.threads),
            reference=config.get("REFERENCE"),
            relmse_bbox=config.get("RELMSE_BBOX"),
            checkpoint=config.get("CHECKPOINT"),
            record_dump=config.get("RECORD_DUMP"),
            log_every=config.get("LOG_EVERY", cls.log_every),
            root_path=root_path,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values).validate()

    def validate(self):
        if not self.scene:
            raise ConfigError("SCENE", "a scene file or preset:<name> is required")
        if isinstance(self.resolution, int):
            self.resolution = (self.resolution, self.resolution)
        self.resolution = tuple(int(v) for v in self.resolution)
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ConfigError("RESOLUTION", "must be at least 1x1")
        for key in ("wpp", "k", "chunk_size", "threads", "minibatch", "log_every", "max_depth"):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(key.upper(), "must be an integer >= 1")
        if self.train_until < 0 or self.rr_depth < 0:
            key = "TRAIN_UNTIL" if self.train_until < 0 else "RR_DEPTH"
            raise ConfigError(key, "must be >= 0")
        if not 0.0 < float(self.fixed_c) < 1.0:
            raise ConfigError("FIXED_C", "must lie strictly between 0 and 1")
        if self.r_min is not None and self.r_min <= 0:
            raise ConfigError("R_MIN", "must be > 0")
        return self

    def resolve_path(self, path):
        if path is None or path.startswith(PRESET_PREFIX) or os.path.isabs(path):
            return path
        return os.path.join(self.root_path, path)

    @property
    def field_config(self):
        return FieldConfig(
            levels=self.field_levels,
            resolutions=self.field_resolutions,
            features=self.field_features,
            hidden=self.field_hidden,
            k=self.k,
            learning_rate=self.learning_rate,
            seed=self.seed,
        )


def load_config(filename=None, env=True, **defaults):
    """Run configuration from a JSON file and ``WOST_`` environment variables (env wins)."""
    root_path = os.path.dirname(os.path.abspath(filename)) if filename else os.getcwd()
    config = Config(root_path, defaults)
    if filename:
        try:
            config.from_file(filename, load=json.load)
        except (OSError, ValueError) as e:
            raise ConfigError("CONFIG", f"cannot load {filename}: {e}")
    if env:
        config.from_prefixed_env(ENV_PREFIX)
    return config


@dataclass
class RunResult:
    image: SolutionImage
    log: t.List[t.Tuple[int, t.Optional[float], float]]
    walk_stats: WalkStats = dataclasses.field(default_factory=WalkStats)
    train_stats: TrainStats = dataclasses.field(default_factory=TrainStats)
    seconds: float = 0.0

    @property
    def relmse(self):
        return self.log[-1][1] if self.log else None

    @property
    def timings(self):
        return {
            "walk": self.walk_stats.walk_seconds,
            "inference": self.walk_stats.inference_seconds,
            "training": self.train_stats.seconds,
            "total": self.seconds,
        }


class Solver:
    def __init__(self, config=None, **kwargs):
        if config is not None:
            self.init_config(config, **kwargs)

    def init_config(self, config, **overrides):
        if not isinstance(config, RunConfig):
            config = RunConfig.from_mapping(config, **overrides)
        elif overrides:
            config = replace(config, **{k: v for k, v in overrides.items() if v is not None})
        config.validate()
        self.config = config
        self.logger = logging.getLogger(__name__)
        self.scene, self.preset = load_scene_ref(config.resolve_path(config.scene))
        self.accel = build_accel(self.scene, config.t_epsilon)
        self.sampler = load_sampler(config.sampler, self)
        self.field = None
        if self.sampler.uses_field:
            self.field = GuidingField.create(config.field_config, self.scene.bbox)

    @property
    def out_dir(self):
        return self.config.resolve_path(self.config.out)

    @property
    def eval_bbox(self):
        return self.config.eval_bbox or self.scene.bbox

    @property
    def points(self):
        w, h = self.config.resolution
        return eval_grid(self.eval_bbox, w, h)

    def walk_config(self, record=False):
        cfg = self.config
        return WalkConfig(
            epsilon_shell=self.scene.epsilon_shell,
            r_min=cfg.r_min or self.scene.epsilon_shell,
            rr_depth=cfg.rr_depth,
            max_depth=cfg.max_depth,
            reflection=cfg.reflection,
            grazing_clamp=cfg.grazing_clamp,
            record=record,
        )

    def context(self, wpp_index, record=False):
        return StepContext(
            scene=self.scene,
            accel=self.accel,
            sampler=self.sampler,
            config=self.walk_config(record),
            field=self.field,
            wpp_index=wpp_index,
        )

    @property
    def domain_mask(self):
        """Evaluation cells whose center lies in the domain; only these are walked."""
        w, h = self.config.resolution
        return self.scene.inside(self.points).reshape(h, w)

    def relmse_mask(self):
        if not self.config.relmse_bbox:
            return None
        (x0, y0), (x1, y1) = self.config.relmse_bbox
        p = self.points
        inside = (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)
        return inside.reshape(self.config.resolution[1], self.config.resolution[0])

    def load_reference(self, reference=None):
        reference = reference or self.config.reference
        if reference is None or isinstance(reference, SolutionImage):
            return reference
        if reference == ANALYTIC_REFERENCE:
            return self.generate_reference()
        return read_field_output(self.config.resolve_path(reference))

    def run_solve(self, reference=None, write=True):
        """Walk one pass per batch over the evaluation grid, training the field between passes
        while the training threshold has not been reached."""
        cfg = self.config
        w, h = cfg.resolution
        reference = self.load_reference(reference)
        inside = self.domain_mask
        if not inside.any():
            raise ConfigError("EVAL_BBOX", "no evaluation point lies inside the domain")
        mask = self.relmse_mask()
        mask = inside if mask is None else mask & inside
        inside = inside.ravel()
        points = self.points[inside]
        if not inside.all():
            self.logger.info(
                "%d of %d evaluation points lie outside the domain and are left at 0",
                inside.size - points.shape[0], inside.size,
            )
        image = SolutionImage.blank(w, h)
        estimates = np.zeros(inside.size)
        train_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, TRAIN_STREAM]))
        walk_stats, train_stats = WalkStats(), TrainStats()
        log = []
        dumped = False
        start = time.perf_counter()
        self.logger.info(
            "Solving %s: %dx%d points, %d wpp, sampler %s",
            cfg.scene, w, h, cfg.wpp, self.sampler.name,
        )

        for wpp in range(cfg.wpp):
            training = self.field is not None and training_active(wpp, cfg.train_until)
            ctx = self.context(wpp, record=training)
            batch = solve_batch(ctx, points, cfg.seed, cfg.chunk_size, cfg.threads)
            estimates[inside] = batch.estimates
            image.add(estimates)
            walk_stats = walk_stats.merge(batch.stats)
            if training and len(batch.records):
                if cfg.record_dump and not dumped:
                    self.write_records(batch.records, cfg.resolve_path(cfg.record_dump))
                    dumped = True
                stats = self.sampler.train(
                    self.field,
                    batch.records,
                    train_rng,
                    cfg.minibatch,
                    cfg.reflection,
                    cfg.selection_fraction,
                )
                train_stats = train_stats.merge(stats)
                if wpp + 1 == cfg.train_until:
                    self.logger.info("Training stopped after %d wpp", wpp + 1)
            self.logger.debug(
                "wpp %d: %d steps, %d records", wpp + 1, batch.stats.steps, len(batch.records)
            )
            if (wpp + 1) % cfg.log_every == 0 or wpp + 1 == cfg.wpp:
                relmse = compute_relmse(image, reference, mask) if reference is not None else None
                log.append((wpp + 1, relmse, time.perf_counter() - start))

        result = RunResult(image, log, walk_stats, train_stats, time.perf_counter() - start)
        self.logger.info("Solved in %.2fs (%d walk steps)", result.seconds, walk_stats.steps)
        if write and cfg.out:
            self.write_outputs(result, reference)
        return result

    def generate_reference(self, wpp_ref=None):
        """Exact values for analytic presets, else a long uniform-sampler run."""
        if self.preset is not None and self.preset.analytic:
            w, h = self.config.resolution
            inside = self.domain_mask.ravel()
            values = np.where(inside, self.preset.solution(self.points), 0.0)
            return SolutionImage.exact(w, h, values)
        if self.config.reference == ANALYTIC_REFERENCE:
            self.logger.warning(
                "%s has no analytic solution, running a uniform reference", self.config.scene
            )
        wpp_ref = wpp_ref or 64 * self.config.wpp
        solver = Solver(
            replace(self.config, sampler="uniform", wpp=wpp_ref, reference=None, out=None)
        )
        return solver.run_solve(write=False).image

    def run_ablation(self, variants, reference=None):
        """Run each variant with the same seeds and budget; returns ``(variant, RunResult)``
        pairs. A variant is a sampler name optionally followed by ``,key=value`` overrides."""
        if not variants:
            raise ConfigError("MODES", "at least one variant is required")
        reference = self.load_reference(reference) or self.generate_reference()
        results = []
        for variant in variants:
            overrides = parse_variant(variant)
            out = os.path.join(self.out_dir, slugify(variant)) if self.out_dir else None
            solver = Solver(replace(self.config, out=out, reference=None, **overrides))
            self.logger.info("Ablation variant %s", variant)
            results.append((variant, solver.run_solve(reference=reference)))
        if self.out_dir:
            write_rows(
                os.path.join(self.out_dir, "ablation.csv"),
                ("variant", "relmse", "seconds", "train_seconds"),
                [(v, r.relmse, r.seconds, r.train_stats.seconds) for v, r in results],
            )
        return results

    def write_records(self, records, filename):
        write_rows(filename, GuideRecords.CSV_HEADER, records.rows())
        self.logger.info("Wrote %d guiding records to %s", len(records), filename)

    def write_outputs(self, result, reference=None):
        out = self.out_dir
        files = {}
        for fmt in OUTPUT_FORMATS:
            files[fmt] = write_field_output(result.image, os.path.join(out, f"solution.{fmt}"))
        files["convergence"] = os.path.join(out, "convergence.csv")
        write_rows(
            files["convergence"],
            ("wpp", "relmse", "seconds"),
            [(wpp, "" if e is None else e, s) for wpp, e, s in result.log],
        )
        if self.config.checkpoint and self.field is not None:
            files["checkpoint"] = self.config.resolve_path(self.config.checkpoint)
            self.field.save(files["checkpoint"])
        write_json(
            os.path.join(out, "summary.json"),
            {
                "scene": self.config.scene,
                "sampler": self.sampler.name,
                "wpp": self.config.wpp,
                "seed": self.config.seed,
                "resolution": list(self.config.resolution),
                "relmse": result.relmse,
                "relmse_delta": None if reference is None else relmse_delta(reference),
                "timings": result.timings,
                "walks": result.walk_stats.walks,
                "steps": result.walk_stats.steps,
                "escaped": result.walk_stats.escaped,
                "truncated": result.walk_stats.truncated,
                "training_steps": result.train_stats.steps,
                "files": {k: {"path": p, "sha256": hash_file(p)} for k, p in files.items()},
            },
        )
        return files

    def dump_scene(self):
        return dump_scene(self.scene)


VARIANT_KEYS = {
    "k": int,
    "train_until": int,
    "fixed_c": float,
    "reflection": lambda v: v.lower() in ("1", "true", "yes", "on"),
}


def parse_variant(variant):
    name, *options = [p.strip() for p in variant.split(",")]
    overrides = {"sampler": name}
    for option in options:
        key, sep, value = option.partition("=")
        if not sep or key not in VARIANT_KEYS:
            raise ConfigError("MODES", f"invalid variant option '{option}'")
        overrides[key] = VARIANT_KEYS[key](value)
    return overrides


def slugify(variant):
    return "".join(c if c.isalnum() or c in "-_" else "-" for c in variant)

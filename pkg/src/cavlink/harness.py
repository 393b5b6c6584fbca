"""Experiment orchestration: variants, sweeps, records, and reports.

A sweep point is one combination of (SNR, path-loss exponent, sigma_SNR,
sigma_CSI); run_point pushes scenes_per_point synthetic scenes through the
channel and the requested variant's recovery stack (weight -> gate ->
denoise), fuses, scores, and aggregates one ExperimentRecord. Seeds for
every stochastic stage derive from (root seed, point index, scene, cav)
through a fixed splitting rule, so different variants at the same point see
identical channels and are directly paired.

The records CSV carries only deterministic fields and reproduces byte for
byte under a fixed config and root seed; wall-clock stage times go to a
separate timings CSV.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .cav_weighting import (GatePolicy, WeightingModel, apply_weight, gate,
                            load_weighting, weight)
from .channel_models import (DisturbanceProcess, RicianConfig,
                             V2VChannelConfig, sample_disturbance,
                             sample_rician, sample_tdl, sample_v2v_cir)
from .cond_diffusion import (FAST_SCHEDULE_LEVELS, DiffusionSchedule,
                             InferenceSchedule, build_inference_schedule,
                             build_schedule, denoise)
from .errors import ConfigurationError, ModelMissingError
from .feature_core import FeatureMap, SceneSpec, generate_scene
from .fusion_proxy import DEFAULT_THRESHOLDS, FusionConfig, detect_and_score, fuse
from .link_layer import LinkConfig, run_link
from .noise_predictor import NoisePredictorParams, load_params, make_predictor

VARIANTS = ("coop", "coop_w", "coop_d", "coop_wd", "coop_wd_eco")
RECORDS_SCHEMA_VERSION = 1
RECORD_COLUMNS = (
    "schema_version", "config_hash", "variant", "channel", "snr_db",
    "pathloss_n", "sigma_snr_db", "sigma_csi", "seed", "scenes",
    "ap_loose", "ap_strict", "feature_mse_pre", "feature_mse_post",
    "mean_weight", "bypass_fraction", "denoise_invocations",
    "gate_decisions")
TIMING_COLUMNS = (
    "config_hash", "variant", "channel", "snr_db", "pathloss_n",
    "sigma_snr_db", "sigma_csi", "seed", "link_s", "weighting_s",
    "denoising_s", "fusion_s", "recovery_s")


def derive_seed(root: int, *key: int) -> int:
    """Documented splitting rule: (root, *indices) -> independent u63 seed."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass
class ExperimentConfig:
    """Declarative sweep description; see README for the JSON schema."""

    variants: tuple[str, ...] = VARIANTS[:4]
    channel: str = "v2v"
    snr_db_list: tuple[float, ...] = (0.0, 10.0, 20.0)
    pathloss_n_list: tuple[float, ...] = ()
    sigma_snr_list: tuple[float, ...] = (0.0,)
    sigma_csi_list: tuple[float, ...] = (0.0,)
    scenes_per_point: int = 50
    seeds: tuple[int, ...] = (0,)
    num_cavs: int = 2
    slot_len: int = 64
    pilots_per_slot: int = 8
    csi_mode: str = "perfect"
    extra_csi_error_std: float = 0.0
    gate_threshold: float = 0.6
    fusion_mode: str = "mean"
    attention_temperature: float = 1.0
    scene_channels: int = 4
    scene_height: int = 16
    scene_width: int = 16
    scene_objects: int = 3
    blob_amplitude: float = 3.0
    blob_sigma: float = 1.6
    background_std: float = 0.25
    schedule_steps: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.035
    fast_levels: tuple[float, ...] = FAST_SCHEDULE_LEVELS
    weighting_model: str | None = None
    denoiser_model: str | None = None
    pathloss_p0: float = 1.0
    pathloss_distance: float = 50.0
    rician_K: float = 4.0
    rician_K_walk_std: float = 0.0
    v2v_num_paths: int = 6
    v2v_rays_per_path: int = 20
    v2v_wavelength: float = 0.0508
    v2v_tx_speed: tuple[float, float] = (15.0, 0.0)
    v2v_rx_speed: tuple[float, float] = (15.0, 0.0)
    v2v_angle_spread: float = 0.2
    v2v_power_decay: float = 1.0
    v2v_delay_spread: float = 0.4e-6
    v2v_slot_duration: float = 1e-3
    tdl_pdp: tuple[tuple[int, float], ...] = ((0, 0.6), (1, 0.3), (2, 0.1))
    train_snr_low: float = 15.0
    train_snr_high: float = 20.0
    heavy_snr_low: float = -5.0
    heavy_snr_high: float = 0.0
    denoiser_hidden: int = 24
    denoiser_steps: int = 1500
    denoiser_batch: int = 8
    weighting_steps: int = 300
    weighting_batch: int = 8
    beta_coop: float = 0.1
    beta_diffusion: float = 1.0

    def __post_init__(self):
        if not self.variants:
            raise ConfigurationError("variant list must not be empty")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigurationError(f"unknown variant {v!r}")
        if self.channel not in ("rician", "v2v", "tdl"):
            raise ConfigurationError(f"unknown channel {self.channel!r}")
        if not self.snr_db_list:
            raise ConfigurationError("snr_db_list must not be empty")
        if not self.sigma_snr_list or not self.sigma_csi_list:
            raise ConfigurationError("sigma sweep axes must not be empty")
        if self.scenes_per_point < 1:
            raise ConfigurationError("scenes_per_point must be >= 1")
        if not self.seeds:
            raise ConfigurationError("seeds list must not be empty")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        coerced = dict(data)
        for key in ("variants", "snr_db_list", "pathloss_n_list",
                    "sigma_snr_list", "sigma_csi_list", "seeds",
                    "fast_levels", "v2v_tx_speed", "v2v_rx_speed"):
            if key in coerced and coerced[key] is not None:
                coerced[key] = tuple(coerced[key])
        if "tdl_pdp" in coerced:
            coerced["tdl_pdp"] = tuple((int(d), float(p))
                                       for d, p in coerced["tdl_pdp"])
        for key in ("snr_db_list",):
            if key in coerced:
                coerced[key] = tuple(float(v) for v in coerced[key])
        return cls(**coerced)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config root must be an object")
        return cls.from_dict(data)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(channels=self.scene_channels,
                         height=self.scene_height, width=self.scene_width,
                         num_objects=self.scene_objects,
                         blob_amplitude=self.blob_amplitude,
                         blob_sigma=self.blob_sigma,
                         background_std=self.background_std)

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def frame_slots(self) -> int:
        n = self.scene_channels * self.scene_height * self.scene_width
        n_sym = (n + 1) // 2
        return (n_sym + self.slot_len - 1) // self.slot_len


@dataclass(frozen=True)
class SweepPoint:
    index: int
    snr_db: float
    pathloss_n: float | None
    sigma_snr: float
    sigma_csi: float


def sweep_points(cfg: ExperimentConfig) -> list[SweepPoint]:
    n_axis = cfg.pathloss_n_list if cfg.pathloss_n_list else (None,)
    points = []
    idx = 0
    for snr in cfg.snr_db_list:
        for n in n_axis:
            for s_snr in cfg.sigma_snr_list:
                for s_csi in cfg.sigma_csi_list:
                    points.append(SweepPoint(idx, float(snr),
                                             None if n is None else float(n),
                                             float(s_snr), float(s_csi)))
                    idx += 1
    return points


@dataclass
class RuntimeModels:
    """Loaded models and derived schedules for one sweep execution."""

    sched: DiffusionSchedule
    infer_sched: InferenceSchedule
    weighting: WeightingModel | None = None
    predictor_params: NoisePredictorParams | None = None
    denoise_fn: object = None  # (y: FeatureMap, rng_seed: int) -> FeatureMap

    def require_weighting(self, variant: str) -> WeightingModel:
        if self.weighting is None:
            raise ModelMissingError(
                f"variant {variant!r} needs a trained weighting model")
        return self.weighting

    def require_denoiser(self, variant: str):
        if self.denoise_fn is None:
            raise ModelMissingError(
                f"variant {variant!r} needs a trained denoiser model")
        return self.denoise_fn


def load_models(cfg: ExperimentConfig) -> RuntimeModels:
    """Load whatever model files the configured variants require."""
    sched = build_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)
    infer = build_inference_schedule(cfg.fast_levels, sched)
    models = RuntimeModels(sched=sched, infer_sched=infer)
    needs_w = any(v in ("coop_w", "coop_wd", "coop_wd_eco")
                  for v in cfg.variants)
    needs_d = any(v in ("coop_d", "coop_wd", "coop_wd_eco")
                  for v in cfg.variants)
    if needs_w:
        if not cfg.weighting_model or not Path(cfg.weighting_model).exists():
            raise ModelMissingError(
                "weighting model file missing for variants "
                f"{[v for v in cfg.variants if v != 'coop']}: "
                f"{cfg.weighting_model!r}")
        models.weighting = load_weighting(cfg.weighting_model)
    if needs_d:
        if not cfg.denoiser_model or not Path(cfg.denoiser_model).exists():
            raise ModelMissingError(
                "denoiser model file missing: "
                f"{cfg.denoiser_model!r}")
        models.predictor_params = load_params(cfg.denoiser_model)
        predictor = make_predictor(models.predictor_params)
        models.denoise_fn = lambda y, seed: denoise(
            y, predictor, infer, sched, seed)
    return models


def _effective_snr(cfg: ExperimentConfig, point: SweepPoint) -> float:
    """Receiver SNR for the point, with the path-loss budget applied.

    The SNR axis is referenced at the receiver after path loss; when the
    path-loss axis is active, the exponent eats into the link budget
    relative to the 1 m reference so that larger n means a noisier link.
    """
    if point.pathloss_n is None:
        return point.snr_db
    loss_db = 10.0 * point.pathloss_n * np.log10(cfg.pathloss_distance) \
        - 10.0 * np.log10(cfg.pathloss_p0)
    return point.snr_db - loss_db


def _sample_channel(cfg: ExperimentConfig, point: SweepPoint,
                    num_slots: int, seed: int):
    if cfg.channel == "rician":
        rc = RicianConfig(p0=cfg.pathloss_p0,
                          d_k=cfg.pathloss_distance
                          if point.pathloss_n is not None else 1.0,
                          n=point.pathloss_n
                          if point.pathloss_n is not None else 2.0,
                          K=cfg.rician_K, K_walk_std=cfg.rician_K_walk_std,
                          snr_db=point.snr_db)
        return sample_rician(rc, num_slots, seed)
    if cfg.channel == "v2v":
        vc = V2VChannelConfig(
            num_paths=cfg.v2v_num_paths, rays_per_path=cfg.v2v_rays_per_path,
            wavelength=cfg.v2v_wavelength, tx_speed=cfg.v2v_tx_speed,
            rx_speed=cfg.v2v_rx_speed, angle_spread=cfg.v2v_angle_spread,
            power_decay=cfg.v2v_power_decay,
            delay_spread=cfg.v2v_delay_spread,
            slot_duration=cfg.v2v_slot_duration)
        return sample_v2v_cir(vc, num_slots, seed)
    return sample_tdl(list(cfg.tdl_pdp), seed, num_slots)


@dataclass
class ExperimentRecord:
    """Aggregated result of one (variant, sweep point, seed) run."""

    config_hash: str
    variant: str
    channel: str
    snr_db: float
    pathloss_n: float | None
    sigma_snr: float
    sigma_csi: float
    seed: int
    scenes: int
    ap_loose: float
    ap_strict: float
    feature_mse_pre: float
    feature_mse_post: float
    mean_weight: float
    bypass_fraction: float
    denoise_invocations: int
    gate_decisions: int
    stage_times: dict = field(default_factory=dict)
    per_scene_ap_loose: tuple = ()
    per_scene_ap_strict: tuple = ()

    def csv_row(self) -> str:
        vals = [RECORDS_SCHEMA_VERSION, self.config_hash, self.variant,
                self.channel, self.snr_db,
                "" if self.pathloss_n is None else self.pathloss_n,
                self.sigma_snr, self.sigma_csi, self.seed, self.scenes,
                self.ap_loose, self.ap_strict, self.feature_mse_pre,
                self.feature_mse_post, self.mean_weight,
                self.bypass_fraction, self.denoise_invocations,
                self.gate_decisions]
        return ",".join(_fmt(v) for v in vals)

    def timing_row(self) -> str:
        st = self.stage_times
        vals = [self.config_hash, self.variant, self.channel, self.snr_db,
                "" if self.pathloss_n is None else self.pathloss_n,
                self.sigma_snr, self.sigma_csi, self.seed,
                st.get("link", 0.0), st.get("weighting", 0.0),
                st.get("denoising", 0.0), st.get("fusion", 0.0),
                st.get("weighting", 0.0) + st.get("denoising", 0.0)]
        return ",".join(_fmt(v) for v in vals)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_point(cfg: ExperimentConfig, point: SweepPoint,
              models: RuntimeModels, variant: str, seed: int
              ) -> ExperimentRecord:
    """Run one variant at one sweep point with one root seed."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    if variant in ("coop_w", "coop_wd", "coop_wd_eco"):
        models.require_weighting(variant)
    if variant in ("coop_d", "coop_wd", "coop_wd_eco"):
        models.require_denoiser(variant)

    spec = cfg.scene_spec()
    fusion_cfg = FusionConfig(cfg.fusion_mode, cfg.attention_temperature)
    link_cfg = LinkConfig(snr_db=_effective_snr(cfg, point),
                          pilots_per_slot=cfg.pilots_per_slot,
                          csi_mode=cfg.csi_mode,
                          extra_csi_error_std=cfg.extra_csi_error_std)
    num_slots = cfg.frame_slots()
    policy = GatePolicy(cfg.gate_threshold)
    proc = DisturbanceProcess(point.sigma_snr, point.sigma_csi)
    use_disturbance = point.sigma_snr > 0 or point.sigma_csi > 0

    times = {"link": 0.0, "weighting": 0.0, "denoising": 0.0, "fusion": 0.0}
    ap_loose, ap_strict = [], []
    mse_pre, mse_post, weights = [], [], []
    denoise_calls = 0

    for s in range(cfg.scenes_per_point):
        ego, cavs, truth = generate_scene(
            spec, cfg.num_cavs, derive_seed(seed, point.index, s, 0))
        processed = []
        for k, f_k in enumerate(cavs):
            link_seed = derive_seed(seed, point.index, s, 1 + k)
            ch = _sample_channel(cfg, point, num_slots,
                                 derive_seed(seed, point.index, s, 1 + k, 1))
            disturbance = sample_disturbance(
                proc, num_slots,
                derive_seed(seed, point.index, s, 1 + k, 2)) \
                if use_disturbance else None
            t0 = time.perf_counter()
            f_hat, report = run_link(f_k, ch, link_cfg, cfg.slot_len,
                                     link_seed, disturbance)
            times["link"] += time.perf_counter() - t0
            mse_pre.append(float(np.mean((f_hat.data - f_k.data) ** 2)))

            denoise_seed = derive_seed(seed, point.index, s, 1 + k, 77)
            out = f_hat
            if variant in ("coop_w", "coop_wd", "coop_wd_eco"):
                t0 = time.perf_counter()
                w_k = weight(models.weighting, ego, f_hat)
                out = apply_weight(w_k, f_hat)
                times["weighting"] += time.perf_counter() - t0
                weights.append(w_k)
            if variant == "coop_d":
                t0 = time.perf_counter()
                out = models.denoise_fn(f_hat, denoise_seed)
                times["denoising"] += time.perf_counter() - t0
                denoise_calls += 1
            elif variant == "coop_wd":
                t0 = time.perf_counter()
                out = models.denoise_fn(out, denoise_seed)
                times["denoising"] += time.perf_counter() - t0
                denoise_calls += 1
            elif variant == "coop_wd_eco":
                if gate(policy, weights[-1]) == "denoise":
                    t0 = time.perf_counter()
                    out = models.denoise_fn(out, denoise_seed)
                    times["denoising"] += time.perf_counter() - t0
                    denoise_calls += 1
            mse_post.append(float(np.mean((out.data - f_k.data) ** 2)))
            processed.append(out)

        t0 = time.perf_counter()
        fused = fuse(fusion_cfg, ego, processed)
        result = detect_and_score(fused, truth, DEFAULT_THRESHOLDS)
        times["fusion"] += time.perf_counter() - t0
        ap_loose.append(result.ap[DEFAULT_THRESHOLDS[0]])
        ap_strict.append(result.ap[DEFAULT_THRESHOLDS[1]])

    bypass_fraction = (policy.bypass_count / policy.decisions
                       if policy.decisions else 0.0)
    return ExperimentRecord(
        config_hash=cfg.config_hash(), variant=variant, channel=cfg.channel,
        snr_db=point.snr_db, pathloss_n=point.pathloss_n,
        sigma_snr=point.sigma_snr, sigma_csi=point.sigma_csi, seed=seed,
        scenes=cfg.scenes_per_point,
        ap_loose=float(np.mean(ap_loose)),
        ap_strict=float(np.mean(ap_strict)),
        feature_mse_pre=float(np.mean(mse_pre)),
        feature_mse_post=float(np.mean(mse_post)),
        mean_weight=float(np.mean(weights)) if weights else 1.0,
        bypass_fraction=bypass_fraction,
        denoise_invocations=denoise_calls,
        gate_decisions=policy.decisions,
        stage_times=times,
        per_scene_ap_loose=tuple(ap_loose),
        per_scene_ap_strict=tuple(ap_strict))


def run_sweep(cfg: ExperimentConfig, out_dir: str | Path,
              threads: int = 1, models: RuntimeModels | None = None
              ) -> dict[str, Path]:
    """Run every (variant, point, seed) job and write CSVs and plots."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigurationError(f"output directory not writable: {exc}")
    if models is None:
        models = load_models(cfg)
    points = sweep_points(cfg)
    jobs = [(variant, point, seed)
            for point in points
            for variant in cfg.variants
            for seed in cfg.seeds]

    def execute(job):
        variant, point, seed = job
        return run_point(cfg, point, models, variant, seed)

    # Jobs are generated in deterministic (point, variant, seed) order and
    # pool.map preserves it, so records come out already sorted.
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(execute, jobs))
    else:
        records = [execute(job) for job in jobs]

    records_path = out / "records.csv"
    with open(records_path, "w") as fh:
        fh.write(",".join(RECORD_COLUMNS) + "\n")
        for r in records:
            fh.write(r.csv_row() + "\n")
    timings_path = out / "timings.csv"
    with open(timings_path, "w") as fh:
        fh.write(",".join(TIMING_COLUMNS) + "\n")
        for r in records:
            fh.write(r.timing_row() + "\n")
    plots = _write_plots(cfg, records, out)
    return {"records": records_path, "timings": timings_path, **plots}


def _write_plots(cfg: ExperimentConfig, records: list[ExperimentRecord],
                 out: Path) -> dict[str, Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    axes = [("snr_db", lambda r: r.snr_db, cfg.snr_db_list),
            ("pathloss_n", lambda r: r.pathloss_n,
             cfg.pathloss_n_list or ()),
            ("sigma_snr", lambda r: r.sigma_snr, cfg.sigma_snr_list),
            ("sigma_csi", lambda r: r.sigma_csi, cfg.sigma_csi_list)]
    paths = {}
    for name, getter, values in axes:
        if len(values) < 2:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for variant in cfg.variants:
            xs, ys = [], []
            for v in values:
                sel = [r.ap_loose for r in records
                       if r.variant == variant and getter(r) == v]
                if sel:
                    xs.append(v)
                    ys.append(float(np.mean(sel)))
            ax.plot(xs, ys, marker="o", label=variant)
        ax.set_xlabel(name)
        ax.set_ylabel("proxy-AP (loose)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"ap_vs_{name}.svg"
        fig.savefig(path)
        plt.close(fig)
        paths[f"plot_{name}"] = path
    return paths


def make_weighting_generator(cfg: ExperimentConfig):
    """Scene+link triples for self-supervised weighting training.

    Each call yields (ego, light, heavy): the same scene's shared feature
    after a mild link (training SNR window) and after a severe one.
    """
    spec = cfg.scene_spec()
    num_slots = cfg.frame_slots()

    def generator(rng: np.random.Generator):
        ego, cavs, _ = generate_scene(spec, 1, int(rng.integers(2 ** 63)))
        f_k = cavs[0]
        out = []
        for lo, hi in ((cfg.train_snr_low, cfg.train_snr_high),
                       (cfg.heavy_snr_low, cfg.heavy_snr_high)):
            snr = float(rng.uniform(lo, hi))
            point = SweepPoint(0, snr, None, 0.0, 0.0)
            ch = _sample_channel(cfg, point, num_slots,
                                 int(rng.integers(2 ** 63)))
            link_cfg = LinkConfig(snr_db=snr,
                                  pilots_per_slot=cfg.pilots_per_slot,
                                  csi_mode=cfg.csi_mode,
                                  extra_csi_error_std=cfg.extra_csi_error_std)
            f_hat, _ = run_link(f_k, ch, link_cfg, cfg.slot_len,
                                int(rng.integers(2 ** 63)))
            out.append(f_hat)
        return ego, out[0], out[1]

    return generator


def make_denoiser_generator(cfg: ExperimentConfig,
                            weighting: WeightingModel | None):
    """(clean, received) pairs for diffusion training.

    SNR is drawn uniformly from the training window; when a weighting model
    is given, the received feature is weighted first, matching the joint
    pipeline the denoiser sees at inference time.
    """
    spec = cfg.scene_spec()
    num_slots = cfg.frame_slots()

    def generator(rng: np.random.Generator):
        ego, cavs, _ = generate_scene(spec, 1, int(rng.integers(2 ** 63)))
        f_k = cavs[0]
        snr = float(rng.uniform(cfg.train_snr_low, cfg.train_snr_high))
        point = SweepPoint(0, snr, None, 0.0, 0.0)
        ch = _sample_channel(cfg, point, num_slots,
                             int(rng.integers(2 ** 63)))
        link_cfg = LinkConfig(snr_db=snr,
                              pilots_per_slot=cfg.pilots_per_slot,
                              csi_mode=cfg.csi_mode,
                              extra_csi_error_std=cfg.extra_csi_error_std)
        f_hat, _ = run_link(f_k, ch, link_cfg, cfg.slot_len,
                            int(rng.integers(2 ** 63)))
        if weighting is not None:
            f_hat = apply_weight(weight(weighting, ego, f_hat), f_hat)
        return f_k, f_hat

    return generator


def parse_records_csv(path: str | Path) -> list[dict]:
    """Strict reader for the records CSV; rejects schema drift."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ConfigurationError(f"{path}: empty records file")
    header = lines[0].split(",")
    if tuple(header) != RECORD_COLUMNS:
        raise ConfigurationError(f"{path}: unexpected header {header}")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(RECORD_COLUMNS):
            raise ConfigurationError(
                f"{path}: line {ln}: expected {len(RECORD_COLUMNS)} "
                f"fields, got {len(parts)}")
        row = dict(zip(RECORD_COLUMNS, parts))
        try:
            row["snr_db"] = float(row["snr_db"])
            row["ap_loose"] = float(row["ap_loose"])
            row["ap_strict"] = float(row["ap_strict"])
            row["bypass_fraction"] = float(row["bypass_fraction"])
            row["seed"] = int(row["seed"])
        except ValueError as exc:
            raise ConfigurationError(f"{path}: line {ln}: {exc}")
        rows.append(row)
    return rows


def report(records_csv: str | Path,
           timings_csv: str | Path | None = None) -> str:
    """Render markdown summary tables from a records CSV."""
    rows = parse_records_csv(records_csv)
    lines = ["# Sweep report", ""]
    channels = sorted({r["channel"] for r in rows})
    for channel in channels:
        ch_rows = [r for r in rows if r["channel"] == channel]
        snrs = sorted({r["snr_db"] for r in ch_rows})
        variants = [v for v in VARIANTS
                    if any(r["variant"] == v for r in ch_rows)]
        lines.append(f"## Channel: {channel}")
        lines.append("")
        header = "| variant | " + " | ".join(
            f"{snr:g} dB loose | {snr:g} dB strict" for snr in snrs) + " |"
        sep = "|" + "---|" * (1 + 2 * len(snrs))
        lines.append(header)
        lines.append(sep)
        for variant in variants:
            cells = [variant]
            for snr in snrs:
                sel = [r for r in ch_rows
                       if r["variant"] == variant and r["snr_db"] == snr]
                if sel:
                    cells.append(f"{np.mean([r['ap_loose'] for r in sel]):.3f}")
                    cells.append(f"{np.mean([r['ap_strict'] for r in sel]):.3f}")
                else:
                    cells.extend(["-", "-"])
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    if timings_csv is not None:
        lines.extend(_runtime_table(timings_csv))
    return "\n".join(lines)


def _runtime_table(timings_csv: str | Path) -> list[str]:
    with open(timings_csv) as fh:
        csv_lines = fh.read().splitlines()
    if not csv_lines or tuple(csv_lines[0].split(",")) != TIMING_COLUMNS:
        raise ConfigurationError(f"{timings_csv}: unexpected timing header")
    rows = []
    for ln, line in enumerate(csv_lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(TIMING_COLUMNS):
            raise ConfigurationError(f"{timings_csv}: line {ln}: bad row")
        rows.append(dict(zip(TIMING_COLUMNS, parts)))
    out = ["## Recovery-stack runtime", "",
           "| variant | snr_db | mean recovery time (s) |", "|---|---|---|"]
    combos = sorted({(r["variant"], r["snr_db"]) for r in rows},
                    key=lambda c: (VARIANTS.index(c[0]), float(c[1])))
    for variant, snr in combos:
        sel = [float(r["recovery_s"]) for r in rows
               if r["variant"] == variant and r["snr_db"] == snr]
        out.append(f"| {variant} | {snr} | {np.mean(sel):.4f} |")
    out.append("")
    return out

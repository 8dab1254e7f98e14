"""Episode loop, suites, ablations and result emission.

Every run is driven by a RunConfig, and every output file embeds the config
hash and tool version, so results are reproducible byte for byte: the same
(config, seed) pair always yields the same episode log.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .baselines import AGENT_KINDS, make_agent
from .control import ControllerGains, ControllerState, control_error, follower_map, pd_step
from .geometry import PolarOffset, angular_distance, rad, wrap_angle
from .metrics import (EpisodeMetrics, StepRecord, TerminationRule, TrackingQualityParams,
                      auc_judd, episode_metrics, gaussian_bump, summarize,
                      tracking_quality, tracking_quality_raw)
from .perception import PerceptionConfig, compute_energy
from .world import (Scenario, bearing_to_pixel, bundled_scenario, dominant_positions,
                    ground_truth, init_camera, init_world, load_scenario,
                    polar_from_bearing, polar_of, polar_to_pixel, render,
                    scene_to_bearing, step_world, write_pgm, apply_command)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "follower_basic"    # bundled name or path to a scenario file
    agent: str = "ours"
    seeds: tuple[int, ...] = (0,)
    max_steps: int = 500
    loss_termination_window: int = 10
    # controller
    lambda_p: float = 1.0
    lambda_d: float = 0.1
    # perception
    hidden_dim: int = 64
    attn_dim: int = 32
    lr: float = 1e-4
    clip: float = 5.0
    adaptive_lr: bool = True
    disable_motion_gate: bool = False
    disable_attn_loss: bool = False
    frame_diff_residual: bool = False
    # metrics
    rho_max: float = 250.0
    theta_max_deg: float = 90.0
    metric_lambda: float = 1.0
    # baselines
    random_spread_deg: float = 30.0
    # output
    out_dir: str = "out"
    dump_frames: bool = False

    def validate(self) -> "RunConfig":
        if self.agent not in AGENT_KINDS:
            raise ConfigError(f"unknown agent {self.agent!r}; expected one of {AGENT_KINDS}")
        if self.max_steps < 1 or self.loss_termination_window < 1:
            raise ConfigError("max_steps and loss_termination_window must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(RunConfig)}
        for k in d:
            if k not in names:
                raise ConfigError(f"unknown config key {k!r}")
        if "seeds" in d:
            d = dict(d, seeds=tuple(d["seeds"]))
        return RunConfig(**d).validate()

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def perception_config(self) -> PerceptionConfig:
        return PerceptionConfig(hidden_dim=self.hidden_dim, attn_dim=self.attn_dim,
                                lr=self.lr, clip=self.clip, adaptive_lr=self.adaptive_lr,
                                disable_motion_gate=self.disable_motion_gate,
                                disable_attn_loss=self.disable_attn_loss,
                                frame_diff_residual=self.frame_diff_residual)

    def gains(self) -> ControllerGains:
        return ControllerGains(lambda_p=self.lambda_p, lambda_d=self.lambda_d)


def resolve_scenario(name_or_path: str) -> Scenario:
    if os.path.exists(name_or_path):
        return load_scenario(name_or_path)
    return bundled_scenario(name_or_path)


def output_dir(cfg: RunConfig) -> str:
    return os.environ.get("AVBENCH_OUT", cfg.out_dir)


@dataclass
class EpisodeResult:
    lines: list            # JSONL lines including header and summary
    records: list          # StepRecord per executed step
    metrics: EpisodeMetrics
    terminated_early: bool
    seed: int


def _predicted_pixel(s: Scenario, est_bearing, mode: str):
    n = s.image_size
    if mode == "pan_tilt":
        pan, tilt = est_bearing
        col = (pan / s.camera.fov.horizontal + 0.5) * n
        row = (tilt / s.camera.fov.vertical + 0.5) * n
    else:
        polar = polar_from_bearing(s, est_bearing)
        col = (polar.theta / s.camera.fov.horizontal + 0.5) * n
        row = (polar.rho / s.camera.rho_view) * n
    return (int(min(max(row, 0), n - 1)), int(min(max(col, 0), n - 1)))


def _fixation_pixels(s: Scenario, world, cam) -> list:
    pix = []
    for pos in dominant_positions(s, world):
        if s.mode == "pan_tilt":
            p = bearing_to_pixel(s, cam, scene_to_bearing(s, pos))
        else:
            p = polar_to_pixel(s, polar_of(cam, pos))
        if p is not None:
            pix.append(p)
    return pix


def run_episode(cfg: RunConfig, seed: int, scenario: Scenario | None = None,
                agent=None) -> EpisodeResult:
    """Run one seeded episode: render -> perceive -> control -> actuate -> step.

    Terminates at the step budget or on the configured streak of lost steps.
    """
    cfg.validate()
    s = scenario if scenario is not None else resolve_scenario(cfg.scenario)
    root = np.random.SeedSequence(seed)
    world_ss, agent_ss = root.spawn(2)
    noise_seed = int(world_ss.generate_state(1)[0])
    agent_rng = np.random.default_rng(agent_ss)

    if agent is None:
        agent = make_agent(cfg.agent, perception_cfg=cfg.perception_config(),
                           random_spread=rad(cfg.random_spread_deg))
    agent.begin_episode(s, agent_rng)

    world = init_world(s, noise_seed)
    cam = init_camera(s)
    ctrl = ControllerState()
    gains = cfg.gains()
    budget = min(cfg.max_steps, s.duration)
    term = TerminationRule(window=cfg.loss_termination_window, max_steps=budget)
    tq = TrackingQualityParams(rho_max=cfg.rho_max, theta_max=rad(cfg.theta_max_deg),
                               lam=cfg.metric_lambda)
    tq_rel = replace(tq, relaxed_distance=True)
    ideal = PolarOffset(rho=s.ideal_distance, theta=0.0)

    header = {"kind": "header", "version": __version__, "config_hash": cfg.hash(),
              "scenario": s.name, "seed": seed, "config": cfg.to_dict()}
    lines = [json.dumps(header, sort_keys=True)]
    records = []
    frames_dir = None
    if cfg.dump_frames:
        frames_dir = os.path.join(output_dir(cfg), "frames")
        os.makedirs(frames_dir, exist_ok=True)

    done = False
    for t in range(budget):
        frame = render(s, world, cam)
        if frames_dir is not None:
            write_pgm(frame, os.path.join(frames_dir, f"ep{seed}_t{t}.pgm"))
        gt = ground_truth(s, world, cam)
        est = agent.act(frame, gt)

        if s.mode == "pan_tilt":
            gt_rel = (wrap_angle(gt.bearing[0] - cam.pan),
                      wrap_angle(gt.bearing[1] - cam.tilt))
            offset = math.hypot(gt_rel[0], gt_rel[1])
            cur = PolarOffset(rho=ideal.rho, theta=offset)
            cur_ideal = PolarOffset(rho=ideal.rho, theta=0.0)
            cam_bearing = (cam.pan, cam.tilt)
            gt_bearing_abs = gt.bearing
        else:
            cur = gt.polar
            cur_ideal = ideal
            gt_rel = (gt.polar.theta, 0.0)
            cam_bearing = (0.0, 0.0)
            gt_bearing_abs = gt_rel
        graw = tracking_quality_raw(cur, cur_ideal, tq)
        gamma = tracking_quality(cur, cur_ideal, tq)
        gamma_rel = tracking_quality(cur, cur_ideal, tq_rel)
        lost = graw <= -1.0
        aae_deg = math.degrees(math.hypot(angular_distance(cam_bearing[0], gt_bearing_abs[0]),
                                          angular_distance(cam_bearing[1], gt_bearing_abs[1])))

        fixations = _fixation_pixels(s, world, cam)
        auc = None
        if fixations:
            sal = est.saliency if est.saliency is not None else gaussian_bump(
                (s.image_size, s.image_size), _predicted_pixel(s, est.bearing, s.mode))
            auc = auc_judd(sal, fixations)

        if s.mode == "pan_tilt":
            e = control_error(est.bearing)
            cmd, ctrl = pd_step(e, ctrl, gains)
        else:
            polar_est = polar_from_bearing(s, est.bearing)
            e = (polar_est.rho - s.ideal_distance, polar_est.theta)
            cmd, ctrl = follower_map(e, ctrl, gains)
        new_cam = apply_command(s, cam, cmd)
        applied = ((new_cam.pan - cam.pan, new_cam.tilt - cam.tilt)
                   if s.mode == "pan_tilt" else new_cam.vel)
        energy = compute_energy(est.loss_global, gt_rel, (0.0, 0.0))

        rec = StepRecord(step=t, gamma=gamma, gamma_raw=graw, lost=lost,
                         aae_deg=aae_deg, camera_bearing=cam_bearing,
                         action_bearing=est.bearing, gamma_relaxed=gamma_rel, auc=auc)
        records.append(rec)
        cam_state = ({"pan": cam.pan, "tilt": cam.tilt} if s.mode == "pan_tilt"
                     else {"x": cam.x, "y": cam.y, "heading": cam.heading})
        lines.append(json.dumps({
            "kind": "step", "step": t, "agent": cfg.agent, "seed": seed,
            "camera": cam_state, "cmd_raw": [cmd[0], cmd[1]],
            "cmd_applied": [applied[0], applied[1]],
            "clamped": bool(abs(cmd[0] - applied[0]) > 1e-12 or abs(cmd[1] - applied[1]) > 1e-12),
            "action_bearing": [est.bearing[0], est.bearing[1]],
            "gt_bearing": [gt_bearing_abs[0], gt_bearing_abs[1]],
            "gt_visible": gt.visible, "gamma": gamma, "gamma_raw": graw,
            "gamma_relaxed": gamma_rel, "lost": lost, "aae_deg": aae_deg,
            "loss_global": est.loss_global, "loss_attn": est.loss_attn,
            "energy": energy,
        }, sort_keys=True))

        done = term.update(lost)
        if done or t + 1 >= budget:
            break
        cam = new_cam
        world = step_world(s, world)

    m = episode_metrics(records, max_steps=cfg.max_steps)
    terminated_early = len(records) < budget
    lines.append(json.dumps({
        "kind": "summary", "recall": m.recall, "precision": m.precision,
        "precision_relaxed": m.precision_relaxed, "aae_deg": m.aae_mean,
        "auc_judd": m.auc_judd, "steps": m.steps_survived,
        "terminated_early": terminated_early,
    }, sort_keys=True))
    return EpisodeResult(lines=lines, records=records, metrics=m,
                         terminated_early=terminated_early, seed=seed)


# ---------------------------------------------------------------------------
# suites

CSV_HEADER = "scenario,seed,recall,precision,precision_relaxed,aae_deg,auc_judd,steps"


def _csv_row(scenario_name: str, seed: int, m: EpisodeMetrics) -> str:
    return (f"{scenario_name},{seed},{m.recall:.6f},{m.precision:.6f},"
            f"{m.precision_relaxed:.6f},{m.aae_mean:.6f},{m.auc_judd:.6f},{m.steps_survived}")


def run_suite(cfg: RunConfig, seeds=None, write_logs: bool = False) -> dict:
    """Run every seed, write the per-episode CSV and a mean/stddev summary.

    Returns {"csv": path, "summary": {...}, "episodes": [EpisodeMetrics...]}.
    A failing episode still flushes the rows finished so far.
    """
    cfg.validate()
    seeds = list(cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    s = resolve_scenario(cfg.scenario)
    out = output_dir(cfg)
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, f"suite_{s.name}_{cfg.agent}.csv")

    episodes = []
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(f"# avbench {__version__} config={cfg.hash()}\n")
        fh.write(CSV_HEADER + "\n")
        for seed in seeds:
            try:
                res = run_episode(cfg, seed, scenario=s)
            except Exception:
                fh.flush()
                raise
            episodes.append(res.metrics)
            fh.write(_csv_row(s.name, seed, res.metrics) + "\n")
            if write_logs:
                log_path = os.path.join(out, f"episode_{s.name}_{cfg.agent}_{seed}.jsonl")
                with open(log_path, "w", encoding="utf-8") as lg:
                    lg.write("\n".join(res.lines) + "\n")

    summary = {"agent": cfg.agent, "scenario": s.name, "episodes": len(episodes),
               "config_hash": cfg.hash(), "version": __version__}
    for name in ("recall", "precision", "precision_relaxed", "aae_mean", "auc_judd"):
        mean, std = summarize([getattr(m, name) for m in episodes])
        summary[name] = {"mean": mean, "std": std}
    summary_path = os.path.join(out, f"suite_{s.name}_{cfg.agent}_summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return {"csv": csv_path, "summary_path": summary_path, "summary": summary,
            "episodes": episodes}


# ---------------------------------------------------------------------------
# ablations


def run_ablation(cfg: RunConfig, grid: dict[str, dict], seeds=None) -> dict:
    """Run the base config plus each named variant over identical seeds.

    Variant overrides are validated against RunConfig fields before anything
    runs. Output CSV pairs rows by seed: variant,scenario,seed,<metrics>.
    """
    cfg.validate()
    names = {f.name for f in dataclasses.fields(RunConfig)}
    for variant, overrides in grid.items():
        for key in overrides:
            if key not in names:
                raise ConfigError(f"variant {variant!r}: unknown config key {key!r}")
    seeds = list(cfg.seeds if seeds is None else seeds)

    variants = {"full": {}}
    variants.update(grid)
    out = output_dir(cfg)
    os.makedirs(out, exist_ok=True)
    s = resolve_scenario(cfg.scenario)
    csv_path = os.path.join(out, f"ablation_{s.name}.csv")
    results = {}
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(f"# avbench {__version__} config={cfg.hash()}\n")
        fh.write("variant," + CSV_HEADER + "\n")
        for variant, overrides in variants.items():
            vcfg = replace(cfg, **overrides).validate()
            episodes = []
            for seed in seeds:
                res = run_episode(vcfg, seed, scenario=s)
                episodes.append(res.metrics)
                fh.write(f"{variant}," + _csv_row(s.name, seed, res.metrics) + "\n")
            results[variant] = episodes
    return {"csv": csv_path, "results": results}


def load_ablation_grid(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "variants" not in doc or not isinstance(doc["variants"], dict):
        raise ConfigError(f"{path}: expected an object with a 'variants' map")
    return doc["variants"]


def bundled_ablation_grid() -> dict:
    """The shipped ablation grid: gate off, attention loss off, gain sweep."""
    from importlib import resources
    ref = resources.files("avbench").joinpath("scenarios/ablation_grid.json")
    return json.loads(ref.read_text())["variants"]


# ---------------------------------------------------------------------------
# plots (standalone SVG, no plotting dependency)


def _svg_doc(width: int, height: int, body: str, meta: str) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<!-- {meta} -->\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n{body}</svg>\n')


def _bar_chart(title: str, labels: list[str], values: list[float], meta: str) -> str:
    w, h, pad = 640, 360, 50
    vmax = max(max(values), 1e-9)
    n = len(values)
    bw = (w - 2 * pad) / max(n, 1)
    body = [f'<text x="{w/2}" y="24" text-anchor="middle" font-size="16">{title}</text>']
    for i, (lab, v) in enumerate(zip(labels, values)):
        bh = (h - 2 * pad) * max(v, 0.0) / vmax
        x = pad + i * bw
        body.append(f'<rect x="{x + 2:.1f}" y="{h - pad - bh:.1f}" width="{bw - 4:.1f}" '
                    f'height="{bh:.1f}" fill="#4878a8"/>')
        body.append(f'<text x="{x + bw/2:.1f}" y="{h - pad + 14}" text-anchor="middle" '
                    f'font-size="9">{lab}</text>')
        body.append(f'<text x="{x + bw/2:.1f}" y="{h - pad - bh - 4:.1f}" '
                    f'text-anchor="middle" font-size="9">{v:.3g}</text>')
    body.append(f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" '
                f'stroke="black"/>')
    return _svg_doc(w, h, "\n".join(body), meta)


def _trace_chart(title: str, series: list[float], meta: str) -> str:
    w, h, pad = 640, 360, 50
    n = len(series)
    lo, hi = min(-1.0, min(series)), max(1.0, max(series))
    pts = []
    for i, v in enumerate(series):
        x = pad + (w - 2 * pad) * (i / max(n - 1, 1))
        y = h - pad - (h - 2 * pad) * ((v - lo) / (hi - lo))
        pts.append(f"{x:.1f},{y:.1f}")
    zero_y = h - pad - (h - 2 * pad) * ((0.0 - lo) / (hi - lo))
    body = [
        f'<text x="{w/2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{pad}" y1="{zero_y:.1f}" x2="{w - pad}" y2="{zero_y:.1f}" '
        f'stroke="#cccccc"/>',
        f'<polyline points="{" ".join(pts)}" fill="none" stroke="#a84848" '
        f'stroke-width="1.5"/>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
    ]
    return _svg_doc(w, h, "\n".join(body), meta)


def emit_plots(in_path: str, out_dir_: str | None = None) -> list[str]:
    """Render SVGs from a metrics CSV (bar charts) or an episode JSONL
    (per-step tracking-quality trace). Returns the written paths."""
    out = out_dir_ or os.path.dirname(in_path) or "."
    os.makedirs(out, exist_ok=True)
    written = []
    if in_path.endswith(".jsonl"):
        gammas, meta = [], f"avbench {__version__}"
        with open(in_path, "r", encoding="utf-8") as fh:
            for line in fh:
                doc = json.loads(line)
                if doc.get("kind") == "header":
                    meta = f'avbench {doc.get("version")} config={doc.get("config_hash")}'
                elif doc.get("kind") == "step":
                    gammas.append(doc["gamma"])
        if not gammas:
            raise ValueError(f"{in_path}: no step records")
        path = os.path.join(out, "trace_gamma.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(_trace_chart("tracking quality per step", gammas, meta))
        return [path]

    with open(in_path, "r", encoding="utf-8") as fh:
        raw_lines = fh.read().splitlines()
    meta = f"avbench {__version__}"
    rows = []
    header = None
    for ln, line in enumerate(raw_lines, start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            meta = line.lstrip("# ").strip()
            continue
        cells = line.split(",")
        if header is None:
            header = cells
            continue
        if len(cells) != len(header):
            raise ValueError(f"{in_path}:{ln}: expected {len(header)} columns, got {len(cells)}")
        rows.append(dict(zip(header, cells)))
    if header is None or not rows:
        raise ValueError(f"{in_path}: no data rows")

    labels = [f'{r.get("variant", "")}{"/" if "variant" in r else ""}s{r["seed"]}'
              for r in rows]
    for metric in ("recall", "precision", "precision_relaxed", "aae_deg", "auc_judd"):
        if metric not in header:
            continue
        try:
            values = [float(r[metric]) for r in rows]
        except ValueError as e:
            raise ValueError(f"{in_path}: bad value in column {metric}: {e}") from e
        path = os.path.join(out, f"plot_{metric}.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(_bar_chart(metric, labels, values, meta))
        written.append(path)
    return written

"""Run configuration and the file-to-file pipeline stages.

Every stage reads its inputs from disk and writes its outputs to disk, so a
full ``pipeline`` run and a sequence of single-stage CLI calls produce the
same bytes.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import awc, clusters, directions, evaluation, features, rsa, sem, vtk
from .errors import InputFormatError, ValidationError

DEFAULTS = {
    "seed": 0,
    "output_dir": "fibra-run",
    "input": {"volume": None},
    "simulate": {"preset": "rotated", "blur_sigma": 0.7, "noise_sigma": 10.0},
    "dirfield": {"sigma": directions.DEFAULT_SIGMA, "cube_edge": directions.DEFAULT_CUBE,
                 "threshold": None, "min_voxels": directions.DEFAULT_MIN_VOXELS},
    "features": {"mode": features.MEAN_DIR, "w": 8, "stride": 8, "n_min": 16,
                 "standardize": None, "metric": "axial", "log_c1": features.LOG_C1},
    "cluster": {"method": "sem", "k_init": 10, "max_iter": 200, "beta": 1.0, "n_min": None,
                "eps_lab": 0.005, "restarts": 5, "lam": None, "lambda_preset": "rsa",
                "n0": None, "growth": 1.25, "max_steps": 100},
}

RSA_KEYS = {"dims", "radius", "length", "volume_fraction", "max_attempts", "normal",
            "anomaly", "region"}


def _merge(base, over, where):
    out = copy.deepcopy(base)
    for key, value in (over or {}).items():
        if key not in out:
            raise ValidationError(f"unknown config key {where}.{key}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "fibra-run"
    input: dict = field(default_factory=lambda: dict(DEFAULTS["input"]))
    simulate: dict = field(default_factory=lambda: dict(DEFAULTS["simulate"]))
    dirfield: dict = field(default_factory=lambda: dict(DEFAULTS["dirfield"]))
    features: dict = field(default_factory=lambda: dict(DEFAULTS["features"]))
    cluster: dict = field(default_factory=lambda: dict(DEFAULTS["cluster"]))

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        sim = dict(d.pop("simulate", {}) or {})
        rsa_over = {k: sim.pop(k) for k in list(sim) if k in RSA_KEYS}
        merged = _merge(DEFAULTS, d, "config")
        merged["simulate"] = _merge(DEFAULTS["simulate"], sim, "simulate")
        merged["simulate"].update(rsa_over)
        cfg = cls(**merged)
        try:
            cfg.validate()
        except ValidationError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ValidationError(f"bad config value: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise InputFormatError(path, str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise InputFormatError(path, exc.msg, exc.lineno) from exc
        if not isinstance(data, dict):
            raise InputFormatError(path, "config must be a JSON object", 1)
        return cls.from_dict(data)

    def to_dict(self):
        return {"seed": self.seed, "output_dir": self.output_dir, "input": self.input,
                "simulate": self.simulate, "dirfield": self.dirfield,
                "features": self.features, "cluster": self.cluster}

    def rsa_params(self) -> rsa.RsaParams:
        sim = self.simulate
        over = {k: v for k, v in sim.items() if k in RSA_KEYS}
        base = rsa.preset(sim.get("preset", "rotated"))
        merged = {**base.to_dict(), **over, "seed": int(self.seed)}
        return rsa.RsaParams.from_dict(merged).validate()

    def window_spec(self) -> features.WindowSpec:
        f = self.features
        return features.WindowSpec(int(f["w"]), int(f["stride"]), int(f["n_min"])).validate()

    def sem_params(self) -> sem.SemParams:
        c = self.cluster
        return sem.SemParams(
            k_init=int(c["k_init"]), max_iter=int(c["max_iter"]), beta=float(c["beta"]),
            n_min=None if c["n_min"] is None else int(c["n_min"]), eps_lab=float(c["eps_lab"]),
            restarts=int(c["restarts"]), seed=int(self.seed),
        ).validate()

    def awc_params(self, mode: str) -> awc.AwcParams:
        c = self.cluster
        lam = c["lam"]
        if lam is None:
            preset = c.get("lambda_preset", "rsa")
            if preset not in awc.LAMBDA_PRESETS:
                raise ValidationError(f"unknown lambda preset {preset!r}")
            lam = awc.LAMBDA_PRESETS[preset][mode]
        return awc.AwcParams(lam=float(lam), n0=None if c["n0"] is None else int(c["n0"]),
                             growth=float(c["growth"]), max_steps=int(c["max_steps"])).validate()

    def validate(self):
        if self.input.get("volume") is None:
            self.rsa_params()
        if self.simulate.get("blur_sigma", 0) < 0 or self.simulate.get("noise_sigma", 0) < 0:
            raise ValidationError("blur_sigma and noise_sigma must be >= 0")
        if float(self.dirfield["sigma"]) < 0.5:
            raise ValidationError("dirfield.sigma must be >= 0.5")
        if int(self.dirfield["cube_edge"]) < 2:
            raise ValidationError("dirfield.cube_edge must be >= 2")
        self.window_spec()
        if self.features["mode"] not in features.MODES:
            raise ValidationError(f"unknown features.mode {self.features['mode']!r}")
        if self.features["metric"] not in ("axial", "spherical"):
            raise ValidationError(f"unknown features.metric {self.features['metric']!r}")
        method = self.cluster["method"]
        if method == "sem":
            self.sem_params()
        elif method == "awc":
            self.awc_params(self.features["mode"])
        else:
            raise ValidationError(f"unknown cluster.method {method!r}")
        return self


def _require(path):
    path = Path(path)
    if not path.exists():
        raise InputFormatError(path, "file not found")
    return path


def simulate(cfg: RunConfig, out_dir) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = cfg.rsa_params()
    fs = rsa.generate_rsa(params)
    vox = rsa.voxelize(fs, float(cfg.simulate["blur_sigma"]), float(cfg.simulate["noise_sigma"]),
                       seed=int(cfg.seed))
    directions.write_volume(directions.Volume3D(vox), out / "volume.raw", out / "volume.json")
    rsa.write_system(fs, out / "fibres.csv", out / "system.json")
    flag = " (jammed)" if fs.jammed else ""
    return (f"simulate: {len(fs)} fibres, {int(fs.is_anomaly.sum())} anomalous, "
            f"volume fraction {fs.volume_fraction:.4f}{flag}, dims {'x'.join(map(str, fs.dims))}")


def dirfield(cfg: RunConfig, volume_path, out_csv) -> str:
    vol = directions.read_volume(_require(volume_path))
    d = cfg.dirfield
    df = directions.direction_field(vol, float(d["sigma"]), int(d["cube_edge"]),
                                    d["threshold"], int(d["min_voxels"]))
    directions.write_direction_field(df, out_csv)
    return (f"dirfield: {'x'.join(map(str, df.grid_dims))} cubes, "
            f"{int(df.valid.sum())} valid, threshold {df.meta['threshold']:.2f}")


def extract(cfg: RunConfig, directions_csv, out_csv) -> str:
    df = directions.read_direction_field(_require(directions_csv))
    f = cfg.features
    fg = features.extract_features(df, cfg.window_spec(), f["mode"], f["standardize"],
                                   f["metric"], float(f["log_c1"]))
    features.write_features(fg, out_csv)
    return f"features: {len(fg)} windows of {'x'.join(map(str, fg.grid_dims))}, mode {fg.mode}"


def cluster_sem(cfg: RunConfig, features_csv, out_csv, mixture_json=None) -> str:
    fg = features.read_features(_require(features_csv))
    params = cfg.sem_params()
    res = sem.sem_fit(fg, params)
    cmap = res.cluster_map
    clusters.write_cluster_map(cmap, out_csv, extra={"method": "sem"})
    if mixture_json:
        sem.write_mixture(res, mixture_json, params)
    return (f"cluster-sem: {len(cmap)} windows, {int(cmap.anomaly_mask.sum())} anomalous, "
            f"{res.n_surviving} components before merging")


def cluster_awc(cfg: RunConfig, features_csv, out_csv, edges_csv=None) -> str:
    fg = features.read_features(_require(features_csv))
    params = cfg.awc_params(fg.mode)
    res = awc.awc_fit(fg, params)
    cmap = res.cluster_map
    clusters.write_cluster_map(cmap, out_csv, extra={"method": "awc", "lambda": params.lam})
    if edges_csv:
        with open(edges_csv, "w") as fh:
            fh.write("i,j\n")
            for i, j in res.edges():
                fh.write(f"{int(i)},{int(j)}\n")
    return (f"cluster-awc: {len(cmap)} windows, {cmap.n_clusters} clusters, "
            f"{int(cmap.anomaly_mask.sum())} anomalous, lambda {params.lam}")


def truth_from_system(system_json, features_json, out_csv=None):
    system_json = _require(system_json)
    try:
        meta = json.loads(Path(features_json).read_text())
        spec = features.WindowSpec(**meta["window"])
        cube_edge = int(meta["cube_edge"])
        system = json.loads(system_json.read_text())
        region = rsa.AnomalyRegion.from_dict(system["region"])
        dims = system["dims"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputFormatError(features_json, f"cannot derive window grid: {exc}") from exc
    truth = rsa.region_labels(region, dims, spec, cube_edge)
    if out_csv:
        clusters.write_cluster_map(truth, out_csv, extra={"method": "ground-truth"})
    return truth


def evaluate(pred_csv, out_json, truth_csv=None, system_json=None, features_json=None,
             truth_out=None) -> str:
    pred = clusters.read_cluster_map(_require(pred_csv))
    if truth_csv:
        truth = clusters.read_cluster_map(_require(truth_csv))
    elif system_json and features_json:
        truth = truth_from_system(system_json, features_json, truth_out)
    else:
        raise ValidationError("evaluate needs --truth or --system with --features")
    report = evaluation.evaluate(pred, truth)
    Path(out_json).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return (f"evaluate: misclassification {report.misclassification:.4f}, "
            f"Rand index {report.rand_index:.4f}, {report.n_clusters} clusters")


def export_vtk(out, labels_csv=None, features_csv=None) -> str:
    cmap = clusters.read_cluster_map(_require(labels_csv)) if labels_csv else None
    fg = features.read_features(_require(features_csv)) if features_csv else None
    if cmap is None and fg is None:
        raise ValidationError("export-vtk needs --labels and/or --features")
    if cmap is not None and fg is not None and tuple(cmap.grid_dims) != tuple(fg.grid_dims):
        raise ValidationError("labels and features come from different window grids")
    vtk.export_vtk(out, cmap, fg)
    dims = (cmap or fg).grid_dims
    return f"export-vtk: {'x'.join(map(str, dims))} grid -> {out}"


def run(cfg: RunConfig, out_dir=None):
    """Run every stage, writing all artefacts into one directory."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    lines = []
    given = cfg.input.get("volume")
    if given:
        volume = Path(given)
    else:
        lines.append(simulate(cfg, out))
        volume = out / "volume.raw"
    lines.append(dirfield(cfg, volume, out / "directions.csv"))
    lines.append(extract(cfg, out / "directions.csv", out / "features.csv"))
    if cfg.cluster["method"] == "sem":
        lines.append(cluster_sem(cfg, out / "features.csv", out / "labels.csv", out / "mixture.json"))
    else:
        lines.append(cluster_awc(cfg, out / "features.csv", out / "labels.csv", out / "edges.csv"))
    if not given:
        lines.append(evaluate(out / "labels.csv", out / "report.json",
                              system_json=out / "system.json",
                              features_json=out / "features.json", truth_out=out / "truth.csv"))
    lines.append(export_vtk(out / "labels.vtk", out / "labels.csv", out / "features.csv"))
    return lines

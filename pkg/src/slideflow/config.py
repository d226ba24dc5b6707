"""Flat ``section.key = value`` run configuration.

Every key has a typed default; files and overrides may only set known keys.
The effective configuration renders back to the same format, so a run can be
reproduced by feeding its sidecar file back in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .data_io import SynthConfig
from .denoiser import DenoiserConfig
from .errors import SlideflowError
from .flow import FlowConfig
from .priors import ZinbParams, prior_from_name


class ConfigError(SlideflowError, ValueError):
    """Malformed configuration text or an unknown key."""


_SYNTH = SynthConfig()
_FLOW = FlowConfig()

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "denoiser.layers": 4,
    "denoiser.heads": 4,
    "denoiser.hidden": 128,
    "denoiser.k": 8,
    "denoiser.dropout": 0.2,
    "denoiser.time_dim": 16,
    "flow.steps": _FLOW.steps,
    "flow.prior": "zinb",
    "flow.prior_mu": 0.2,
    "flow.prior_phi": 2.0,
    "flow.prior_pi": 0.5,
    "flow.lr": _FLOW.lr,
    "flow.clip": _FLOW.clip,
    "flow.epochs": _FLOW.epochs,
    "flow.patience": _FLOW.patience,
    "flow.log1p_targets": True,
    "flow.regions_per_slide": 1,
    "flow.init_output_head": True,
    "synth.replicates": 5,
    "synth.n_spots": _SYNTH.n_spots,
    "synth.n_genes": _SYNTH.n_genes,
    "synth.d_in": _SYNTH.d_in,
    "synth.layout": _SYNTH.layout,
    "synth.rho": _SYNTH.rho,
    "synth.snr": _SYNTH.snr,
    "synth.coupling_k": _SYNTH.coupling_k,
    "synth.jitter": _SYNTH.jitter,
    "synth.signal_scale": _SYNTH.signal_scale,
    "synth.count_scale": _SYNTH.count_scale,
    "synth.noise_phi": _SYNTH.noise.phi,
    "synth.noise_pi": _SYNTH.noise.pi,
    "synth.law_seed": _SYNTH.law_seed,
    "eval.n_hvg": 50,
    "predict.format": "slb",
    "ablate.steps": (1, 2, 5, 10, 16),
    "ablate.priors": ("zinb",),
    "bench.spot_counts": (1000, 2000, 4000, 8000, 16000),
    "bench.repeats": 3,
    "paths.out": "out",
    "paths.train": (),
    "paths.val": (),
    "paths.test": (),
    "paths.slide": "",
    "paths.checkpoint": "",
    "paths.predictions": "",
    "paths.truth": "",
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(key: str, text: str) -> Any:
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(t) for t in items)
            return tuple(items)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def _render_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.values[key] = _parse_value(key, value) if isinstance(value, str) else value

    def update(self, items: Mapping[str, Any]) -> "RunConfig":
        for k, v in items.items():
            self.set(k, v)
        return self

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{source}:{lineno}: unknown configuration key {key!r}")
            cfg.values[key] = _parse_value(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text, str(path))

    def render(self) -> str:
        return "".join(f"{k} = {_render_value(self.values[k])}\n" for k in sorted(self.values))

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.render())
        return path

    # -- typed views ----------------------------------------------------------

    def denoiser(self, n_genes: int, d_in: int) -> DenoiserConfig:
        v = self.values
        return DenoiserConfig(
            n_genes=n_genes,
            d_in=d_in,
            layers=v["denoiser.layers"],
            heads=v["denoiser.heads"],
            hidden=v["denoiser.hidden"],
            k=v["denoiser.k"],
            dropout=v["denoiser.dropout"],
            time_dim=v["denoiser.time_dim"],
            seed=v["seed"],
        )

    def flow(self, prior: str | None = None, steps: int | None = None) -> FlowConfig:
        v = self.values
        return FlowConfig(
            steps=v["flow.steps"] if steps is None else steps,
            prior=prior_from_name(prior or v["flow.prior"], v["flow.prior_mu"], v["flow.prior_phi"], v["flow.prior_pi"]),
            lr=v["flow.lr"],
            clip=v["flow.clip"],
            epochs=v["flow.epochs"],
            patience=v["flow.patience"],
            seed=v["seed"],
            log1p_targets=v["flow.log1p_targets"],
            n_hvg=v["eval.n_hvg"],
            init_output_head=v["flow.init_output_head"],
            regions_per_slide=v["flow.regions_per_slide"],
        )

    def synth(self, seed: int) -> SynthConfig:
        v = self.values
        return SynthConfig(
            n_spots=v["synth.n_spots"],
            n_genes=v["synth.n_genes"],
            d_in=v["synth.d_in"],
            layout=v["synth.layout"],
            rho=v["synth.rho"],
            snr=v["synth.snr"],
            coupling_k=v["synth.coupling_k"],
            jitter=v["synth.jitter"],
            signal_scale=v["synth.signal_scale"],
            count_scale=v["synth.count_scale"],
            noise=ZinbParams(1.0, v["synth.noise_phi"], v["synth.noise_pi"]),
            seed=seed,
            law_seed=v["synth.law_seed"],
        )


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out

"""Run configuration: flat ``key = value`` files with strict key checking."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

MOE_MODES = ("dense", "moe-single", "moe-modality")
PRECISIONS = ("float32", "float64")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class TrainConfig:
    # architecture
    layers: int = 4
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 256
    moe_mode: str = "dense"
    n_speech_experts: int = 4
    n_text_experts: int = 4
    d_expert: int = 0  # 0: ffn_dim // top_k, keeps active FFN width at the dense budget
    top_k: int = 0  # 0: 2 for moe-single, 1 for moe-modality
    renormalize_topk: bool = False
    conv_kernel: int = 15
    text_conv_window: int = 8
    sub_channels: int = 32
    feat_dim: int = 16
    vocab_size: int = 32
    dropout: float = 0.1
    test_mode: bool = False
    # objective
    ctc_weight: float = 0.3
    balance_weight: float = 0.1
    label_smoothing: float = 0.1
    # optimisation
    peak_lr: float = 1.5e-3
    warmup: int = 400
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-9
    epochs: int = 10
    batch_size: int = 8
    precision: str = "float32"
    seed: int = 0
    avg_last: int = 3
    # augmentation
    word_dropout: float = 0.125
    specaug_freq_masks: int = 1
    specaug_freq_width: int = 2
    specaug_time_masks: int = 1
    specaug_time_width: int = 3
    # synthetic data
    train_utts: int = 2000
    dev_utts: int = 200
    utt_tokens: int = 6
    frames_per_token: int = 8
    noise: float = 0.1
    # decoding
    beam: int = 4

    @property
    def n_experts(self) -> int:
        return self.n_speech_experts + self.n_text_experts

    @property
    def k(self) -> int:
        if self.moe_mode == "dense":
            return 1
        if self.top_k:
            return self.top_k
        return 2 if self.moe_mode == "moe-single" else 1

    @property
    def expert_dim(self) -> int:
        return self.d_expert or self.ffn_dim // self.k

    def validate(self) -> "TrainConfig":
        def bad(name, why):
            raise ConfigError(f"{name}: {why} (got {getattr(self, name)!r})")

        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and (not isinstance(v, int) or isinstance(v, bool)):
                bad(f.name, "must be an integer")
            if f.type == "float" and not isinstance(v, (int, float)):
                bad(f.name, "must be a number")
        positive = ("layers", "d_model", "heads", "ffn_dim", "conv_kernel", "text_conv_window",
                    "sub_channels", "feat_dim", "batch_size", "frames_per_token", "utt_tokens", "beam",
                    "warmup")
        for name in positive:
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        if self.moe_mode not in MOE_MODES:
            bad("moe_mode", f"must be one of {', '.join(MOE_MODES)}")
        if self.precision not in PRECISIONS:
            bad("precision", f"must be one of {', '.join(PRECISIONS)}")
        if self.d_model % self.heads:
            bad("heads", f"must divide d_model={self.d_model}")
        if self.d_model % 2:
            bad("d_model", "must be even for sinusoidal encodings")
        if self.conv_kernel % 2 == 0:
            bad("conv_kernel", "must be odd")
        if self.text_conv_window > self.conv_kernel // 2 + 1:
            bad("text_conv_window", f"must be <= {self.conv_kernel // 2 + 1} (causal half of the kernel)")
        if self.moe_mode != "dense":
            if self.n_speech_experts < 1:
                bad("n_speech_experts", "must be >= 1")
            if self.n_text_experts < 1:
                bad("n_text_experts", "must be >= 1")
            pool = self.n_experts if self.moe_mode == "moe-single" else min(self.n_speech_experts, self.n_text_experts)
            if not 1 <= self.k <= pool:
                bad("top_k", f"must lie in [1, {pool}] for {self.moe_mode}")
        if self.d_expert < 0 or self.top_k < 0:
            bad("d_expert" if self.d_expert < 0 else "top_k", "must be >= 0")
        if self.vocab_size < 5:
            bad("vocab_size", "needs room for 4 special tokens plus at least one symbol")
        if self.frames_per_token % 4:
            bad("frames_per_token", "must be a multiple of 4")
        for name in ("dropout", "word_dropout", "label_smoothing"):
            if not 0 <= getattr(self, name) < 1:
                bad(name, "must lie in [0, 1)")
        for name in ("ctc_weight", "balance_weight", "noise", "peak_lr", "adam_eps"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                bad(name, "must lie in [0, 1)")
        if self.epochs < 0 or self.avg_last < 1:
            bad("epochs" if self.epochs < 0 else "avg_last", "out of range")
        return self

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Stable hash of the canonicalised configuration."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, typ: str, raw: str):
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None
    return raw


def parse_config(text: str, **overrides) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{key}: unknown key (line {lineno})")
        if key in values:
            raise ConfigError(f"{key}: duplicate key (line {lineno})")
        values[key] = _coerce(key, types[key], raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values).validate()


def load_config(path, **overrides) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text(), **overrides)


def toy_config(moe_mode: str = "dense", **kw) -> TrainConfig:
    """Two-layer float64 configuration used by gradient checks and oracle tests."""
    base = dict(
        layers=2, d_model=8, heads=2, ffn_dim=16, sub_channels=2, feat_dim=8, vocab_size=7,
        n_speech_experts=2, n_text_experts=2, conv_kernel=15, dropout=0.0, precision="float64",
        moe_mode=moe_mode, word_dropout=0.0, specaug_freq_masks=0, specaug_time_masks=0,
    )
    base.update(kw)
    return TrainConfig(**base).validate()

"""Experiment configuration: plain-text parsing, validation, serialization.

The on-disk format is UTF-8 text with one ``key = value`` assignment per
line, ``#`` starting a comment, and dotted section prefixes grouping keys
by module.  Every key has a default, so an empty string parses to the
default experiment; unknown keys are rejected rather than ignored, which
catches typos that would otherwise silently run the wrong experiment.

Sections and keys (defaults in parentheses):

    world.classes (10)            class count
    world.domains (4)             domain count including the held-out one
    world.samples_per_cell (200)  samples per (class, domain) cell
    world.noise (0.1)             embedding noise scale
    world.dim (64)                embedding dimension
    world.shift_scale (2.0)      norm of each domain's style shift
    world.token_scale (0.01)      norm scale of text description tokens
    world.shots (0)               per-class cap on client data; 0 = all
    encoder.max_tokens (16)       text-tower sequence capacity
    transfer.alignment_weight (0.5)  direction term weight; rest is class keeping
    transfer.learning_rate (1e-3)
    transfer.weight_decay (0.05)
    transfer.epochs (20)
    transfer.batch_size (32)
    transfer.hidden (0)           transform hidden width; 0 = dim // 2
    prompt.length (4)             tokens per prompt block
    prompt.temperature (0.15)     shared softmax temperature
    prompt.generator_mode (soft)  unseen-sample prompt blending: soft | onehot
    prompt.init_scale (0.0)       prompt init draw scale; 0 = exact zero start
    rounds.count (10)             federated rounds
    rounds.global_epochs (10)     local epochs on the shared prompt per round
    rounds.domain_epochs (1)      local epochs on the domain prompt per round
    rounds.global_lr (3e-3)
    rounds.head_lr (0.01)
    rounds.domain_lr (1e-3)
    rounds.weight_decay (0.5)
    rounds.lr_decay (0.7)         per-round multiplier on all three rates
    rounds.batch_size (2000)
    rounds.weighting (uniform)    upload averaging: uniform | samples
    run.out ()                    output directory; empty = resolve at runtime
    run.seeds (0,1,2)             comma-separated seed list
    run.variant (full)            method variant for single runs
    run.variants (all)            comma-separated variant list for ablation
    run.holdout (-1)              held-out domain for single runs; -1 = all

Seeds enter per run: the stored world spec carries seed 0 and the runner
substitutes each requested seed, so one config describes the whole sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .data import WorldSpec
from .encoder import EncoderConfig
from .errors import ConfigurationError
from .federation import FederationConfig, MethodToggles
from .prompts import PromptConfig
from .style_transfer import TransferConfig

# Ablation variants: which parts of the method run.  Toggle order:
# (global prompt, domain prompt, contrastive, prompt generator,
#  style transfer, target description).
VARIANTS: dict[str, MethodToggles] = {
    "global-only": MethodToggles(True, False, False, False, False, False),
    "domain-only": MethodToggles(False, True, False, True, False, False),
    "global-style": MethodToggles(True, False, False, False, True, False),
    "dual-prompt": MethodToggles(True, True, True, True, False, False),
    "no-contrast": MethodToggles(True, True, False, True, True, False),
    "target-text": MethodToggles(True, True, True, True, True, True),
    "full": MethodToggles(True, True, True, True, True, False),
}

# Canonical ordering for "variants = all" and for ablation output files.
VARIANT_ORDER = (
    "global-only",
    "domain-only",
    "global-style",
    "dual-prompt",
    "no-contrast",
    "target-text",
    "full",
)


def variant_toggles(name: str) -> MethodToggles:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown variant {name!r}; valid names: {', '.join(VARIANT_ORDER)}"
        ) from None


@dataclass(frozen=True)
class ExperimentConfig:
    """Every tunable of a full experiment, one value per config key."""

    world: WorldSpec
    max_tokens: int
    transfer: TransferConfig
    prompt: PromptConfig
    rounds: FederationConfig
    out_dir: str
    seeds: tuple[int, ...]
    variant: str
    variants: tuple[str, ...]
    holdout: int

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("duplicate seeds")
        variant_toggles(self.variant)
        for name in self.variants:
            variant_toggles(name)
        if not self.variants:
            raise ConfigurationError("ablation needs at least one variant")
        if not -1 <= self.holdout < self.world.domains:
            raise ConfigurationError(
                f"holdout must be -1 or a domain index below {self.world.domains}"
            )
        if self.max_tokens < 2 * self.prompt.length + 2:
            raise ConfigurationError(
                "encoder.max_tokens must fit two prompt blocks plus description "
                f"and class tokens: need at least {2 * self.prompt.length + 2}"
            )

    @property
    def toggles(self) -> MethodToggles:
        return variant_toggles(self.variant)

    def encoder_config(self, seed: int) -> EncoderConfig:
        return EncoderConfig(dim=self.world.dim, max_tokens=self.max_tokens, seed=seed)

    def world_spec(self, seed: int) -> WorldSpec:
        return replace(self.world, seed=seed)

    def holdouts(self) -> tuple[int, ...]:
        if self.holdout >= 0:
            return (self.holdout,)
        return tuple(range(self.world.domains))


def _parse_bool(raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ConfigurationError(f"expected true or false, got {raw!r}")


def _parse_seeds(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(part.strip()) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigurationError(f"bad seed list {raw!r}") from None


def _parse_variants(raw: str) -> tuple[str, ...]:
    if raw == "all":
        return VARIANT_ORDER
    names = tuple(part.strip() for part in raw.split(",") if part.strip())
    for name in names:
        variant_toggles(name)
    return names


# key -> (converter, default-as-string).  The serialized form of every
# default round-trips through its converter; a test asserts this.
_KEYS: dict[str, tuple] = {
    "world.classes": (int, "10"),
    "world.domains": (int, "4"),
    "world.samples_per_cell": (int, "200"),
    "world.noise": (float, "0.1"),
    "world.dim": (int, "64"),
    "world.shift_scale": (float, "2.0"),
    "world.token_scale": (float, "0.01"),
    "world.shots": (int, "0"),
    "encoder.max_tokens": (int, "16"),
    "transfer.alignment_weight": (float, "0.5"),
    "transfer.learning_rate": (float, "0.001"),
    "transfer.weight_decay": (float, "0.05"),
    "transfer.epochs": (int, "20"),
    "transfer.batch_size": (int, "32"),
    "transfer.hidden": (int, "0"),
    "prompt.length": (int, "4"),
    "prompt.temperature": (float, "0.15"),
    "prompt.generator_mode": (str, "soft"),
    "prompt.init_scale": (float, "0.0"),
    "rounds.count": (int, "10"),
    "rounds.global_epochs": (int, "10"),
    "rounds.domain_epochs": (int, "1"),
    "rounds.global_lr": (float, "0.003"),
    "rounds.head_lr": (float, "0.01"),
    "rounds.domain_lr": (float, "0.001"),
    "rounds.weight_decay": (float, "0.5"),
    "rounds.lr_decay": (float, "0.7"),
    "rounds.batch_size": (int, "2000"),
    "rounds.weighting": (str, "uniform"),
    "run.out": (str, ""),
    "run.seeds": (_parse_seeds, "0,1,2"),
    "run.variant": (str, "full"),
    "run.variants": (_parse_variants, "all"),
    "run.holdout": (int, "-1"),
}


def parse_config_text(text: str) -> dict[str, str]:
    """Raw ``key = value`` lines to a key -> value-string map.

    Later assignments win, matching how command lines override files.
    """
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        values[key] = raw.strip()
    return values


def build_config(values: dict[str, str] | None = None) -> ExperimentConfig:
    """Assemble an ExperimentConfig from value strings over the defaults."""
    values = dict(values or {})
    for key in values:
        if key not in _KEYS:
            raise ConfigurationError(f"unknown key {key!r}")
    resolved = {}
    for key, (conv, default) in _KEYS.items():
        raw = values.get(key, default)
        try:
            resolved[key] = conv(raw)
        except ConfigurationError:
            raise
        except (TypeError, ValueError):
            raise ConfigurationError(f"bad value for {key}: {raw!r}") from None

    world = WorldSpec(
        classes=resolved["world.classes"],
        domains=resolved["world.domains"],
        samples_per_cell=resolved["world.samples_per_cell"],
        noise=resolved["world.noise"],
        dim=resolved["world.dim"],
        seed=0,
        shift_scale=resolved["world.shift_scale"],
        token_scale=resolved["world.token_scale"],
        shots=resolved["world.shots"],
    )
    transfer = TransferConfig(
        alignment_weight=resolved["transfer.alignment_weight"],
        learning_rate=resolved["transfer.learning_rate"],
        weight_decay=resolved["transfer.weight_decay"],
        epochs=resolved["transfer.epochs"],
        batch_size=resolved["transfer.batch_size"],
        hidden=resolved["transfer.hidden"],
    )
    prompt = PromptConfig(
        length=resolved["prompt.length"],
        temperature=resolved["prompt.temperature"],
        generator_mode=resolved["prompt.generator_mode"],
        init_scale=resolved["prompt.init_scale"],
    )
    rounds = FederationConfig(
        rounds=resolved["rounds.count"],
        global_epochs=resolved["rounds.global_epochs"],
        domain_epochs=resolved["rounds.domain_epochs"],
        global_lr=resolved["rounds.global_lr"],
        head_lr=resolved["rounds.head_lr"],
        domain_lr=resolved["rounds.domain_lr"],
        weight_decay=resolved["rounds.weight_decay"],
        lr_decay=resolved["rounds.lr_decay"],
        batch_size=resolved["rounds.batch_size"],
        weighting=resolved["rounds.weighting"],
    )
    return ExperimentConfig(
        world=world,
        max_tokens=resolved["encoder.max_tokens"],
        transfer=transfer,
        prompt=prompt,
        rounds=rounds,
        out_dir=resolved["run.out"],
        seeds=resolved["run.seeds"],
        variant=resolved["run.variant"],
        variants=resolved["run.variants"],
        holdout=resolved["run.holdout"],
    )


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return build_config(parse_config_text(fh.read()))


def _format_value(key: str, config: ExperimentConfig) -> str:
    value = _config_value(key, config)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if key == "run.variants" and value == VARIANT_ORDER:
            return "all"
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _config_value(key: str, config: ExperimentConfig):
    section, _, field = key.partition(".")
    if section == "world":
        return getattr(config.world, field)
    if section == "encoder":
        return config.max_tokens
    if section == "transfer":
        return getattr(config.transfer, field)
    if section == "prompt":
        return getattr(config.prompt, field)
    if section == "rounds":
        return getattr(config.rounds, "rounds" if field == "count" else field)
    mapping = {
        "out": config.out_dir,
        "seeds": config.seeds,
        "variant": config.variant,
        "variants": config.variants,
        "holdout": config.holdout,
    }
    return mapping[field]


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical text form: every key, sorted, one per line.

    parse(serialize(c)) == c, and serializing again yields identical bytes,
    so configs can be diffed and hashed.
    """
    lines = [f"{key} = {_format_value(key, config)}" for key in sorted(_KEYS)]
    return "\n".join(lines) + "\n"

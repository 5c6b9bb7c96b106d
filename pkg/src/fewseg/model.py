"""Full model: the adapter bank wired into a frozen encoder ahead of the promptable decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn

from .backbone import PROFILES, EncoderConfig, ImageEncoder, freeze, load_pretrained
from .checkpoint import load_tensors, save_tensors
from .decoder import MaskDecoder
from .errors import GeometryMismatch, InvalidCombination
from .hf_adapter import HfaConfig, HighFrequencyAdapter
from .ms_adapter import MsfaConfig, MultiScaleAdapter
from .selector import Selector


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=lambda: PROFILES["toy"])
    hfa: HfaConfig = field(default_factory=HfaConfig)
    msfa: MsfaConfig = field(default_factory=MsfaConfig)
    use_hfa: bool = True
    use_msfa: bool = True
    use_selector: bool = True
    selector_bias: bool = True
    freeze_decoder: bool = False
    decoder_heads: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.use_selector and not (self.use_hfa and self.use_msfa):
            raise InvalidCombination("selector requires both the high-frequency and multi-scale adapters")

    @property
    def has_adapters(self) -> bool:
        return self.use_hfa or self.use_msfa

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        d["hfa"] = HfaConfig(**d.get("hfa", {}))
        d["msfa"] = MsfaConfig(**d.get("msfa", {}))
        return cls(**d)

    def variant(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


class AdapterBank(nn.Module):
    """Trainable side modules producing the per-layer feature added to the encoder.

    Fusion rule by enabled components:
      hfa + msfa + selector -> (w1*F_f + b1) + (w2*F_p + b2)
      hfa + msfa            -> F_f + F_p
      hfa only              -> F_f
      msfa only             -> F_p
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        enc = cfg.encoder
        C, K = enc.embed_dim, enc.num_blocks
        self.cfg = cfg
        self.hfa = HighFrequencyAdapter(C, enc.patch_size, cfg.hfa, input_size=enc.input_size) if cfg.use_hfa else None
        if cfg.use_msfa:
            if cfg.msfa.per_layer:
                self.msfa = nn.ModuleList(MultiScaleAdapter(C, cfg.msfa) for _ in range(K))
            else:
                self.msfa = MultiScaleAdapter(C, cfg.msfa)
        else:
            self.msfa = None
        if cfg.use_selector:
            self.selector = nn.ModuleList(Selector(C, learn_bias=cfg.selector_bias) for _ in range(K))
        else:
            self.selector = None

    def _msfa(self, k: int):
        return self.msfa[k] if isinstance(self.msfa, nn.ModuleList) else self.msfa

    def prepare(self, image, image_embedding):
        return self.hfa(image, image_embedding) if self.hfa is not None else None

    def fused(self, k: int, features_in: torch.Tensor, clue):
        F_p = self._msfa(k)(features_in) if self.msfa is not None else None
        if self.selector is not None:
            return self.selector[k](features_in, clue, F_p)
        if clue is not None and F_p is not None:
            return clue + F_p
        return clue if clue is not None else F_p


class SegModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.encoder = ImageEncoder(enc)
            self.adapters = AdapterBank(cfg) if cfg.has_adapters else None
            self.decoder = MaskDecoder(enc.embed_dim, enc.grid, enc.input_size, num_heads=cfg.decoder_heads)
        if enc.pretrained_weights:
            load_pretrained(self.encoder, enc.pretrained_weights)
        freeze(self.encoder)
        if cfg.freeze_decoder:
            for p in self.decoder.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        self.encoder.eval()
        return self

    def encode(self, image):
        return self.encoder(image, self.adapters)

    def forward(self, image: torch.Tensor, boxes) -> torch.Tensor:
        feats = self.encode(image)
        return self.decoder(feats.embedding, boxes)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def param_counts(self) -> dict:
        def n(m):
            return sum(p.numel() for p in m.parameters()) if m is not None else 0

        return {
            "encoder": n(self.encoder),
            "adapters": n(self.adapters),
            "decoder": n(self.decoder),
            "total": n(self),
            "trainable": sum(p.numel() for p in self.trainable_parameters()),
        }

    # checkpoint namespaces: encoder., hfa., msfa., selector.<k>., decoder.
    def export_state(self, include_encoder: bool = False) -> dict[str, torch.Tensor]:
        out = {}
        for name, t in self.state_dict().items():
            if name.startswith("encoder.") and not include_encoder:
                continue
            if name.startswith("adapters."):
                name = name[len("adapters."):]
            out[name] = t
        return out

    def import_state(self, tensors: dict[str, torch.Tensor], strict: bool = True) -> None:
        own = self.state_dict()
        mapped = {}
        for name, t in tensors.items():
            key = name if name.startswith(("encoder.", "decoder.")) else f"adapters.{name}"
            if key not in own:
                if strict:
                    raise GeometryMismatch(f"unexpected tensor {name!r} in checkpoint")
                continue
            if tuple(own[key].shape) != tuple(t.shape):
                raise GeometryMismatch(f"{name}: checkpoint {tuple(t.shape)} vs model {tuple(own[key].shape)}")
            mapped[key] = t
        if strict:
            missing = [k for k in own if not k.startswith("encoder.") and k not in mapped]
            if missing:
                raise GeometryMismatch(f"checkpoint lacks {missing[0]!r}")
        with torch.no_grad():
            for key, t in mapped.items():
                own[key].copy_(t.to(own[key].dtype))

    def save(self, path, include_encoder: bool = False, extra: dict | None = None):
        geometry = {"model": self.cfg.to_dict()}
        return save_tensors(path, self.export_state(include_encoder), geometry=geometry, extra=extra)

    @classmethod
    def load(cls, path, cfg: ModelConfig | None = None) -> "SegModel":
        tensors, manifest = load_tensors(path)
        saved = ModelConfig.from_dict(manifest["geometry"]["model"])
        if cfg is None:
            cfg = saved
        elif cfg.encoder.geometry() != saved.encoder.geometry():
            raise GeometryMismatch(f"checkpoint encoder {saved.encoder.geometry()} vs config {cfg.encoder.geometry()}")
        model = cls(cfg)
        model.import_state(tensors)
        return model


def build_model(cfg: ModelConfig | None = None, **overrides) -> SegModel:
    cfg = cfg or ModelConfig()
    if overrides:
        cfg = cfg.variant(**overrides)
    return SegModel(cfg)

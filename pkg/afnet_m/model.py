"""
AFNet-M: a dual-branch ResNet18-shaped network over texture and depth images with

- Mask Attention (MA) after Layer1 and Layer2: X~ = gamma * X + beta, where gamma and beta are
  produced from the salient-region mask by two independent 1x1 conv groups;
- Importance Weights Computing (IWC) at the fusion positions:
  w = sigmoid(conv(avgpool(X)) + conv(maxpool(X))), one shared conv per modality;
- adaptive fusion M = t_iw * X_t + d_iw * X_d, fed into the texture branch's next stage.

The baseline fusion strategies (data, decision, fc-concat and plain conv sum) share the same
backbone code so ablations differ only where the strategies differ.
"""
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .config import FusionStrategy, LAYERS, ModelConfig
from .errors import ConfigError, DataError, LayerLookupError, ShapeError
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor, load_tensor, save_tensor

ATTENTION_INIT_STD = 0.02


class ActivationCache:
    """Forward activations retained by name ("texture.layer4", "depth.stem", "fusion3", ...)."""

    def __init__(self):
        self.activations = OrderedDict()

    def record(self, name, tensor):
        self.activations[name] = tensor
        return tensor

    def __contains__(self, name):
        return name in self.activations

    def __getitem__(self, name):
        try:
            return self.activations[name]
        except KeyError:
            raise LayerLookupError(f"no cached activation named {name!r}; "
                                   f"available: {', '.join(self.activations)}") from None

    def gradient(self, name):
        t = self[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def names(self):
        return list(self.activations)


def _cache(cache, name, tensor):
    if cache is not None:
        cache.record(name, tensor)
    return tensor


class Stem(Module):
    """7x7/2 conv -> batchnorm -> relu -> 3x3/2 max pool."""

    def __init__(self, cin, cout, seed=0, name="stem"):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(cin, cout, 7, stride=2, pad=3, seed=seed, name=name + ".conv"))
        self.bn = self.add_child("bn", BatchNorm2d(cout))

    def __call__(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ConfigError(f"stem input size must be divisible by 4, got {x.shape[-2]}x{x.shape[-1]}")
        x = F.relu(self.bn(self.conv(x)))
        return F.pool2d(x, "max", 3, 3, stride=2, pad=1)

    @staticmethod
    def count(cin, cout):
        return Conv2d.count(cin, cout, 7) + BatchNorm2d.count(cout)


class BasicBlock(Module):
    """conv3x3-bn-relu-conv3x3-bn plus the (projected) shortcut, then relu."""

    def __init__(self, cin, cout, downsample=False, seed=0, name="block"):
        super().__init__()
        if not downsample and cin != cout:
            raise ConfigError(f"block {name}: {cin} -> {cout} channels needs a projection shortcut")
        stride = 2 if downsample else 1
        self.conv1 = self.add_child("conv1", Conv2d(cin, cout, 3, stride, 1, seed=seed, name=name + ".conv1"))
        self.bn1 = self.add_child("bn1", BatchNorm2d(cout))
        self.conv2 = self.add_child("conv2", Conv2d(cout, cout, 3, 1, 1, seed=seed, name=name + ".conv2"))
        self.bn2 = self.add_child("bn2", BatchNorm2d(cout))
        self.shortcut = None
        if downsample:
            self.shortcut = self.add_child("shortcut", Conv2d(cin, cout, 1, stride, 0, seed=seed,
                                                              name=name + ".shortcut"))
            self.shortcut_bn = self.add_child("shortcut_bn", BatchNorm2d(cout))

    def __call__(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return F.relu(F.add(out, identity))

    @staticmethod
    def count(cin, cout, downsample):
        n = Conv2d.count(cin, cout, 3) + Conv2d.count(cout, cout, 3) + 2 * BatchNorm2d.count(cout)
        if downsample:
            n += Conv2d.count(cin, cout, 1) + BatchNorm2d.count(cout)
        return n


def residual_block_forward(x, block):
    return block(x)


class ResidualLayer(Module):
    def __init__(self, cin, cout, blocks, downsample, seed=0, name="layer"):
        super().__init__()
        self.blocks = [self.add_child(str(i), BasicBlock(cin if i == 0 else cout, cout,
                                                         downsample=downsample and i == 0,
                                                         seed=seed, name=f"{name}.{i}"))
                       for i in range(blocks)]

    def __call__(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    @staticmethod
    def count(cin, cout, blocks, downsample):
        return BasicBlock.count(cin, cout, downsample) + (blocks - 1) * BasicBlock.count(cout, cout, False)


class MaskAttention(Module):
    """Learns gamma and beta from a single-channel mask replicated across C channels.

    Each group is Conv1x1(C->C) -> relu -> Conv1x1(C->C).
    """

    def __init__(self, channels, seed=0, name="ma"):
        super().__init__()
        self.channels = channels

        def conv(tag):
            return self.add_child(tag, Conv2d(channels, channels, 1, seed=seed, name=f"{name}.{tag}",
                                              std=ATTENTION_INIT_STD))

        self.gamma_in, self.gamma_out = conv("gamma_in"), conv("gamma_out")
        self.beta_in, self.beta_out = conv("beta_in"), conv("beta_out")

    def modulation(self, x, mask):
        N, C, H, W = x.shape
        if C != self.channels:
            raise ShapeError(f"MA expects {self.channels} channels, feature map has {C}")
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        if m.ndim == 3:
            m = m[None]
        if m.ndim != 4 or m.shape[1] != 1 or m.shape[-2:] != (H, W) or m.shape[0] not in (1, N):
            raise ShapeError(f"mask of shape {m.shape} does not match feature map {x.shape}")
        replicated = F.constant(np.broadcast_to(m, (N, C, H, W)))
        gamma = self.gamma_out(F.relu(self.gamma_in(replicated)))
        beta = self.beta_out(F.relu(self.beta_in(replicated)))
        return gamma, beta

    def __call__(self, x, mask):
        gamma, beta = self.modulation(x, mask)
        return F.add(F.mul(gamma, x), beta)

    @staticmethod
    def count(channels):
        return 4 * Conv2d.count(channels, channels, 1)


def ma_forward(x, mask, ma):
    return ma(x, mask)


class ImportanceWeightsComputer(Module):
    """Per-channel importance weights in (0, 1) from avg- and max-pooled features through one shared 1x1 conv."""

    def __init__(self, channels, seed=0, name="iwc"):
        super().__init__()
        self.channels = channels
        self.conv = self.add_child("conv", Conv2d(channels, channels, 1, seed=seed, name=name + ".conv",
                                                  std=ATTENTION_INIT_STD))

    def __call__(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"IWC expects {self.channels} channels, got feature map {x.shape}")
        avg = self.conv(F.global_pool(x, "avg"))
        mx = self.conv(F.global_pool(x, "max"))
        return F.sigmoid(F.add(avg, mx))

    @staticmethod
    def count(channels):
        return Conv2d.count(channels, channels, 1)


def iwc_weights(x, iwc):
    return iwc(x)


def adaptive_fuse(x_t, x_d, t_iw, d_iw):
    """M = t_iw * X_t + d_iw * X_d with per-channel weights broadcast over H x W."""
    if x_t.shape != x_d.shape:
        raise ShapeError(f"fusion needs equal feature shapes, got {x_t.shape} and {x_d.shape}")
    return F.add(F.mul(t_iw, x_t), F.mul(d_iw, x_d))


def fuse_sum(x_t, x_d):
    if x_t.shape != x_d.shape:
        raise ShapeError(f"fusion needs equal feature shapes, got {x_t.shape} and {x_d.shape}")
    return F.add(x_t, x_d)


class Head(Module):
    """Global average pool -> three fully-connected layers [din -> c/2 -> c/4 -> classes]."""

    def __init__(self, din, width, num_classes, seed=0, name="head"):
        super().__init__()
        h1, h2 = max(width // 2, 1), max(width // 4, 1)
        self.fc1 = self.add_child("fc1", Linear(din, h1, seed=seed, name=name + ".fc1"))
        self.fc2 = self.add_child("fc2", Linear(h1, h2, seed=seed, name=name + ".fc2"))
        self.fc3 = self.add_child("fc3", Linear(h2, num_classes, seed=seed, name=name + ".fc3"))

    def __call__(self, features):
        """:param features: N x D pooled vector."""
        x = F.relu(self.fc1(features))
        x = F.relu(self.fc2(x))
        return self.fc3(x)

    @staticmethod
    def count(din, width, num_classes):
        h1, h2 = max(width // 2, 1), max(width // 4, 1)
        return Linear.count(din, h1) + Linear.count(h1, h2) + Linear.count(h2, num_classes)


def pooled(x):
    return F.flatten(F.global_pool(x, "avg"))


class Branch(Module):
    """Stem + Layer1..Layer`num_layers` of one modality, with MA after the configured layers."""

    def __init__(self, name, in_channels, widths, blocks, ma_positions=(), num_layers=4, seed=0):
        super().__init__()
        self.name = name
        self.num_layers = num_layers
        self.stem = self.add_child("stem", Stem(in_channels, widths[0], seed=seed, name=f"{name}.stem"))
        self.layers = {}
        for k in range(1, num_layers + 1):
            cin = widths[0] if k == 1 else widths[k - 2]
            self.layers[k] = self.add_child(f"layer{k}", ResidualLayer(cin, widths[k - 1], blocks, downsample=k > 1,
                                                                       seed=seed, name=f"{name}.layer{k}"))
            if k in ma_positions:
                self.add_child(f"ma{k}", MaskAttention(widths[k - 1], seed=seed, name=f"{name}.ma{k}"))
        self.ma = {k: self._children[f"ma{k}"] for k in ma_positions if k <= num_layers}

    def stem_forward(self, x, cache=None):
        return _cache(cache, f"{self.name}.stem", self.stem(x))

    def layer_forward(self, k, x, masks=None, cache=None):
        x = self.layers[k](x)
        if k in self.ma:
            if masks is None:
                raise DataError(f"{self.name} branch needs masks for MA at Layer{k}")
            x = self.ma[k](x, masks.level(k))
        return _cache(cache, f"{self.name}.layer{k}", x)

    def __call__(self, x, masks=None, cache=None):
        x = self.stem_forward(x, cache)
        for k in range(1, self.num_layers + 1):
            x = self.layer_forward(k, x, masks, cache)
        return x


class AFNetM(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths, blocks, seed = config.widths, config.blocks_per_layer, config.seed
        ma = config.active_ma_positions
        final = widths[-1]
        classes = config.num_classes
        self.strategy = config.fusion_strategy
        self.branches = OrderedDict()
        self.heads = OrderedDict()
        self.iwc = {}

        def branch(name, in_channels, num_layers=4):
            self.branches[name] = self.add_child(name, Branch(name, in_channels, widths, blocks, ma,
                                                              num_layers=num_layers, seed=seed))

        def head(owner, din):
            self.heads[owner] = self.add_child(f"{owner}.head", Head(din, final, classes, seed=seed,
                                                                     name=f"{owner}.head"))

        if config.modality != "both":
            branch(config.modality, 3)
            head(config.modality, final)
        elif self.strategy is FusionStrategy.DATA:
            branch("fused", 6)
            head("fused", final)
        elif self.strategy is FusionStrategy.DECISION:
            branch("texture", 3), branch("depth", 3)
            head("texture", final), head("depth", final)
        elif self.strategy is FusionStrategy.FC_CONCAT:
            branch("texture", 3), branch("depth", 3)
            head("concat", 2 * final)
        else:
            branch("texture", 3)
            branch("depth", 3, num_layers=max(config.fusion_positions))
            head("texture", final)
            if config.uses_iwc:
                for k in config.fusion_positions:
                    for name in ("texture", "depth"):
                        self.iwc[name, k] = self.add_child(
                            f"{name}.iwc{k}", ImportanceWeightsComputer(widths[k - 1], seed=seed, name=f"{name}.iwc{k}"))

    def fuse(self, k, x_t, x_d):
        if self.config.uses_iwc:
            return adaptive_fuse(x_t, x_d, self.iwc["texture", k](x_t), self.iwc["depth", k](x_d))
        return fuse_sum(x_t, x_d)

    def run_branch(self, name, x, masks=None, cache=None):
        return self.branches[name](x, masks, cache)

    def _check_inputs(self, texture, depth, masks):
        if self.config.needs_texture and texture is None:
            raise DataError("this configuration needs the texture image")
        if self.config.needs_depth and depth is None:
            raise DataError("this configuration needs the depth image")
        if self.config.active_ma_positions and masks is None:
            raise DataError("MA is enabled but no masks were given")

    def __call__(self, texture=None, depth=None, masks=None, cache=None):
        """
        :param texture: N x 3 x S x S, unused by depth-only configs
        :param depth: N x 3 x S x S, unused by texture-only configs
        :param masks: MaskPyramid with N x 1 x S/4 x S/4 and N x 1 x S/8 x S/8 masks (or unbatched 1 x h x w)
        :param cache: optional ActivationCache that receives named intermediate activations
        :return: N x 6 logits
        """
        self._check_inputs(texture, depth, masks)
        cfg = self.config
        if cfg.modality != "both":
            x = texture if cfg.modality == "texture" else depth
            return self.heads[cfg.modality](pooled(self.run_branch(cfg.modality, x, masks, cache)))

        if self.strategy is FusionStrategy.DATA:
            x = F.concat([texture, depth], axis=1)
            return self.heads["fused"](pooled(self.run_branch("fused", x, masks, cache)))

        if self.strategy is FusionStrategy.DECISION:
            p_t = F.softmax(self.heads["texture"](pooled(self.run_branch("texture", texture, masks, cache))))
            p_d = F.softmax(self.heads["depth"](pooled(self.run_branch("depth", depth, masks, cache))))
            return F.log(F.mul(F.add(p_t, p_d), F.constant(0.5)))

        if self.strategy is FusionStrategy.FC_CONCAT:
            v_t = pooled(self.run_branch("texture", texture, masks, cache))
            v_d = pooled(self.run_branch("depth", depth, masks, cache))
            return self.heads["concat"](F.concat([v_t, v_d], axis=1))

        tex, dep = self.branches["texture"], self.branches["depth"]
        x_t = tex.stem_forward(texture, cache)
        x_d = dep.stem_forward(depth, cache)
        last = max(cfg.fusion_positions)
        for k in LAYERS:
            x_t = tex.layer_forward(k, x_t, masks, cache)
            if k <= last:
                x_d = dep.layer_forward(k, x_d, masks, cache)
            if k in cfg.fusion_positions:
                x_t = _cache(cache, f"fusion{k}", self.fuse(k, x_t, x_d))
        return self.heads["texture"](pooled(x_t))


def afnet_forward(texture, depth, masks, config, model=None, cache=None):
    model = model or AFNetM(config)
    return model(texture, depth, masks, cache=cache)


# ---------------------------------------------------------------------------------------------
# parameter accounting

BYTES_PER_PARAM = 4


@dataclass
class ParamCount:
    components: OrderedDict = field(default_factory=OrderedDict)

    @property
    def total(self):
        return sum(self.components.values())

    @property
    def bytes(self):
        return self.total * BYTES_PER_PARAM

    @property
    def megabytes(self):
        return self.bytes / 2 ** 20

    def group(self, kind):
        """Sum of components whose name contains `kind` ("ma", "iwc", "head", "layer", "stem")."""
        return sum(n for name, n in self.components.items() if name.split(".")[1].rstrip("0123456789") == kind)

    def table(self):
        rows = [f"{name:<24}{n:>14,d}" for name, n in self.components.items()]
        rows.append(f"{'total':<24}{self.total:>14,d}")
        rows.append(f"{'bytes (fp32)':<24}{self.bytes:>14,d}  ({self.megabytes:.2f} MB)")
        return "\n".join(rows)


def count_params(config: ModelConfig) -> ParamCount:
    """Closed-form parameter counts per component, without building the network."""
    config.validate()
    w, blocks, classes = config.widths, config.blocks_per_layer, config.num_classes
    ma = config.active_ma_positions
    counts = OrderedDict()

    def branch(name, cin, num_layers=4):
        counts[f"{name}.stem"] = Stem.count(cin, w[0])
        for k in range(1, num_layers + 1):
            layer_in = w[0] if k == 1 else w[k - 2]
            counts[f"{name}.layer{k}"] = ResidualLayer.count(layer_in, w[k - 1], blocks, downsample=k > 1)
            if k in ma:
                counts[f"{name}.ma{k}"] = MaskAttention.count(w[k - 1])

    if config.modality != "both":
        branch(config.modality, 3)
        counts[f"{config.modality}.head"] = Head.count(w[-1], w[-1], classes)
    elif config.fusion_strategy is FusionStrategy.DATA:
        branch("fused", 6)
        counts["fused.head"] = Head.count(w[-1], w[-1], classes)
    elif config.fusion_strategy is FusionStrategy.DECISION:
        branch("texture", 3), branch("depth", 3)
        counts["texture.head"] = Head.count(w[-1], w[-1], classes)
        counts["depth.head"] = Head.count(w[-1], w[-1], classes)
    elif config.fusion_strategy is FusionStrategy.FC_CONCAT:
        branch("texture", 3), branch("depth", 3)
        counts["concat.head"] = Head.count(2 * w[-1], w[-1], classes)
    else:
        branch("texture", 3)
        branch("depth", 3, num_layers=max(config.fusion_positions))
        counts["texture.head"] = Head.count(w[-1], w[-1], classes)
        if config.uses_iwc:
            for k in config.fusion_positions:
                for name in ("texture", "depth"):
                    counts[f"{name}.iwc{k}"] = ImportanceWeightsComputer.count(w[k - 1])
    return ParamCount(counts)


# ---------------------------------------------------------------------------------------------
# checkpoints: manifest.json + one AFTN file per parameter / buffer

def save_checkpoint(model, path, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = dict(
        config=model.config.to_dict(),
        seed=model.config.seed,
        components={k: list(np.shape(v)) for k, v in state.items()},
        **(extra or {}),
    )
    for k, v in state.items():
        save_tensor(path / "tensors" / f"{k}.aftn", v)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    model = AFNetM(ModelConfig(**manifest["config"]))
    state = {k: load_tensor(path / "tensors" / f"{k}.aftn").data for k in manifest["components"]}
    model.load_state_dict(state)
    return model, manifest

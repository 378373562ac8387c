"""Complete predictors: the dual fast/slow network and the single-network baseline."""

from __future__ import annotations

import numpy as np

from . import container
from .backbone import ArchConfig, SlowLearner
from .fastnet import ClassifierHeads, FastLearner
from .params import ParamSet
from .tensor import Tensor, global_avg_pool


class DualNet:
    """Slow learner features, adapted by the fast learner, fed to the heads.

    With ``modulate=False`` the fast learner is bypassed and the heads read
    the pooled last slow stage directly.
    """

    kind = "dualnet"

    def __init__(
        self,
        arch: ArchConfig,
        head_mode: str,
        rngs: dict[str, np.random.Generator],
        modulate: bool = True,
    ):
        self.arch = arch
        self.slow = SlowLearner(arch, rngs["init.backbone"])
        self.fast = FastLearner(arch, rngs["init.fast"])
        self.heads = ClassifierHeads(arch.widths[-1], head_mode, rngs["init.heads"])
        # only trained by the "classification" slow objective
        self.slow_head = ClassifierHeads(arch.widths[-1], "single", rngs["init.heads"], prefix="slow_head")
        self.modulate = modulate

    def adapted_features(self, x: Tensor) -> Tensor:
        feats = self.slow.forward_features(x)
        if not self.modulate:
            return feats[-1]
        return self.fast.modulate(x, feats)[0]

    def features(self, x: Tensor) -> Tensor:
        return global_avg_pool(self.adapted_features(x))

    def predict(self, x: Tensor, task=None) -> Tensor:
        """Logits from the task's head (multi-head) or the shared head."""
        return self.heads(self.features(x), task)

    def supervised_params(self) -> ParamSet:
        parts = [self.slow.backbone_params(), self.heads.params]
        prefixes = ["slow.", ""]
        if self.modulate:
            parts.insert(1, self.fast.params)
            prefixes.insert(1, "fast.")
        return parts[0].merge(*parts[1:], prefixes=prefixes)

    def ssl_params(self, objective: str = "barlow_twins") -> ParamSet:
        if objective == "classification":
            blocks = self.slow.backbone_params()
            return blocks.merge(self.slow_head.params, prefixes=["slow.", ""])
        return self.slow.params.merge(prefixes=["slow."])

    def all_params(self) -> ParamSet:
        return self.slow.params.merge(
            self.fast.params, self.heads.params, self.slow_head.params, prefixes=["slow.", "fast.", "", ""]
        )


class ERNet:
    """Backbone plus linear heads on the pooled last stage; no modulation."""

    kind = "er"

    def __init__(self, arch: ArchConfig, head_mode: str, rngs: dict[str, np.random.Generator]):
        self.arch = arch
        self.backbone = SlowLearner(arch, rngs["init.backbone"])
        self.heads = ClassifierHeads(arch.widths[-1], head_mode, rngs["init.heads"])

    def features(self, x: Tensor) -> Tensor:
        return global_avg_pool(self.backbone.forward_features(x)[-1])

    def predict(self, x: Tensor, task=None) -> Tensor:
        return self.heads(self.features(x), task)

    def supervised_params(self) -> ParamSet:
        return self.backbone.backbone_params().merge(self.heads.params, prefixes=["slow.", ""])

    def all_params(self) -> ParamSet:
        return self.backbone.params.merge(self.heads.params, prefixes=["slow.", ""])


# ------------------------------------------------------------- checkpoints
def _head_meta(heads: ClassifierHeads, key: str) -> dict[str, np.ndarray]:
    if heads.mode == "multi":
        return {f"meta.{key}.task.{t}": np.asarray(c, dtype=np.int64) for t, c in heads.task_classes.items()}
    return {f"meta.{key}.classes": np.asarray(heads.classes, dtype=np.int64)}


def _restore_heads(heads: ClassifierHeads, key: str, arrays: dict[str, np.ndarray]) -> None:
    if heads.mode == "single":
        heads.observe_classes(arrays.get(f"meta.{key}.classes", np.zeros(0, dtype=np.int64)).tolist())
        return
    prefix = f"meta.{key}.task."
    for name in arrays:
        if name.startswith(prefix):
            heads.register_task(int(name[len(prefix):]), arrays[name].tolist())


def save_checkpoint(model, path) -> None:
    """Write parameters (slow ``slow.*``, fast ``fast.*``, heads) and head layout."""
    arrays = model.all_params().snapshot()
    arrays.update(_head_meta(model.heads, "heads"))
    if isinstance(model, DualNet):
        arrays.update(_head_meta(model.slow_head, "slow_head"))
    container.save(path, arrays)


def load_checkpoint(model, path) -> None:
    """Restore a checkpoint into a freshly built model of the same architecture."""
    arrays = container.load(path)
    _restore_heads(model.heads, "heads", arrays)
    if isinstance(model, DualNet):
        _restore_heads(model.slow_head, "slow_head", arrays)
    model.all_params().load({k: v for k, v in arrays.items() if not k.startswith("meta.")})

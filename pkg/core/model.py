# core/model.py
"""
ProtoModel bundles the encoder weights, the sparse classifier and the
inference resolution, and knows how to build its forward pass on a Graph.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from core.checkpoint import Checkpoint
from core.classifier import SparseClassifier, score_var
from core.data import resize_image
from core.encoder import EncoderConfig, bind_params, encoder_forward, init_encoder_params
from core.errors import ConfigError, FormatError
from core.numerics import Graph, Var
from core.prototype_head import PresenceVector, ProtoGrid, channel_softmax_var, presence_pool, presence_var

logger = logging.getLogger(__name__)

CLASSIFIER_KEY = "classifier.weight"


@dataclass
class ForwardPass:
    features: Var
    proto: Var
    presence: Var
    scores: Optional[Var] = None


@dataclass
class Analysis:
    proto: ProtoGrid
    presence: PresenceVector
    scores: np.ndarray

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.scores))


@dataclass
class BatchAnalysis:
    proto: np.ndarray
    presence: np.ndarray
    scores: np.ndarray

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1)

    def probabilities(self) -> np.ndarray:
        shifted = self.scores - self.scores.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


def forward_pass(graph: Graph, variables: Dict[str, Var], images: np.ndarray, config: EncoderConfig,
                 reg_order: int = 2, with_scores: bool = True) -> ForwardPass:
    features = encoder_forward(graph, variables, images, config)
    proto = channel_softmax_var(graph, features)
    presence = presence_var(graph, proto)
    scores = None
    if with_scores and CLASSIFIER_KEY in variables:
        scores = score_var(graph, presence, variables[CLASSIFIER_KEY], reg_order)
    return ForwardPass(features, proto, presence, scores)


@dataclass
class ProtoModel:
    config: EncoderConfig
    params: Dict[str, np.ndarray]
    classifier: SparseClassifier
    resolution: int

    @property
    def class_names(self) -> List[str]:
        return self.classifier.class_names

    @property
    def num_prototypes(self) -> int:
        return self.config.embed_dim

    def parameters(self) -> Dict[str, np.ndarray]:
        out = dict(self.params)
        out[CLASSIFIER_KEY] = self.classifier.weights
        return out

    def update(self, arrays: Dict[str, np.ndarray]):
        for name, value in arrays.items():
            if name == CLASSIFIER_KEY:
                self.classifier.weights = np.asarray(value, dtype=np.float32)
            else:
                self.params[name] = np.asarray(value, dtype=np.float32)

    def copy(self) -> "ProtoModel":
        clf = SparseClassifier(self.classifier.weights.copy(), self.classifier.reg_order,
                               list(self.classifier.class_names))
        return ProtoModel(self.config, {k: v.copy() for k, v in self.params.items()}, clf, self.resolution)

    def bind(self, graph: Graph, trainable: bool = True) -> Dict[str, Var]:
        return bind_params(graph, self.parameters(), trainable)

    def forward(self, graph: Graph, images: np.ndarray, variables: Optional[Dict[str, Var]] = None) -> ForwardPass:
        variables = variables if variables is not None else self.bind(graph, trainable=False)
        return forward_pass(graph, variables, images, self.config, self.classifier.reg_order)

    def prepare(self, image: np.ndarray, resolution: Optional[int] = None) -> np.ndarray:
        size = resolution or self.resolution
        return resize_image(np.asarray(image, dtype=np.float32), size)

    def analyse_batch(self, images: Sequence[np.ndarray], resolution: Optional[int] = None,
                      batch_size: int = 64) -> BatchAnalysis:
        """Proto grids, presence and class scores for many images, evaluated in chunks"""
        prepared = np.stack([self.prepare(img, resolution) for img in images])
        protos, presences, scores = [], [], []
        for start in range(0, len(prepared), batch_size):
            graph = Graph()
            out = self.forward(graph, prepared[start:start + batch_size])
            protos.append(out.proto.value)
            presences.append(out.presence.value)
            scores.append(out.scores.value)
        return BatchAnalysis(np.concatenate(protos), np.concatenate(presences), np.concatenate(scores))

    def analyse(self, image: np.ndarray, resolution: Optional[int] = None) -> Analysis:
        batch = self.analyse_batch([image], resolution)
        grid = ProtoGrid(batch.proto[0])
        return Analysis(grid, presence_pool(grid), batch.scores[0].astype(np.float64))

    # ---- persistence ----------------------------------------------------
    def to_checkpoint(self, epoch: int = 0, metrics: Optional[Dict] = None,
                      extra: Optional[Dict] = None) -> Checkpoint:
        config = {
            "encoder": asdict(self.config),
            "class_names": list(self.class_names),
            "reg_order": self.classifier.reg_order,
            "resolution": self.resolution,
        }
        config.update(extra or {})
        arrays = {name: value.copy() for name, value in self.parameters().items()}
        return Checkpoint(arrays, config, epoch, dict(metrics or {}))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, class_names: Optional[List[str]] = None,
                        reg_order: Optional[int] = None, seed: int = 0) -> "ProtoModel":
        """
        Rebuild a model; an encoder-only checkpoint gets a freshly initialised classifier

        Args:
            ckpt: Loaded checkpoint
            class_names: Required when the checkpoint carries no classifier
            reg_order: Overrides the stored regularisation order
            seed: Seed for classifier initialisation
        """
        if "encoder" not in ckpt.config:
            raise FormatError("config.encoder", "missing")
        config = EncoderConfig(**ckpt.config["encoder"]).validate()
        params = {k: v for k, v in ckpt.arrays.items() if k != CLASSIFIER_KEY}
        expected = init_encoder_params(config, np.random.default_rng(0))
        missing = sorted(set(expected) - set(params))
        if missing:
            raise FormatError("arrays", f"checkpoint lacks encoder arrays {missing[:3]}")
        for name, ref in expected.items():
            if params[name].shape != ref.shape:
                raise FormatError(f"arrays.{name}", f"shape {params[name].shape} does not match {ref.shape}")
        order = reg_order or int(ckpt.config.get("reg_order", 2))
        resolution = int(ckpt.config.get("resolution", max(config.resolutions)))
        if CLASSIFIER_KEY in ckpt.arrays:
            names = ckpt.config.get("class_names") or None
            classifier = SparseClassifier(ckpt.arrays[CLASSIFIER_KEY], order, list(names or []))
        else:
            if not class_names:
                raise ConfigError("checkpoint has no classifier; class names are required to build one")
            classifier = SparseClassifier.initialise(config.embed_dim, class_names, order,
                                                     np.random.default_rng([seed, 2]))
        return cls(config, params, classifier, resolution)


def build_model(config: EncoderConfig, class_names: Sequence[str], seed: int = 0,
                reg_order: int = 2, resolution: Optional[int] = None) -> ProtoModel:
    config.validate()
    params = init_encoder_params(config, np.random.default_rng([seed, 1]))
    classifier = SparseClassifier.initialise(config.embed_dim, list(class_names), reg_order,
                                             np.random.default_rng([seed, 2]))
    return ProtoModel(config, params, classifier, resolution or max(config.resolutions))


def random_model(config: EncoderConfig, class_names: Sequence[str], seed: int = 0,
                 reg_order: int = 2, density: float = 0.5) -> ProtoModel:
    """Random encoder plus a random sparse non-negative classifier"""
    model = build_model(config, class_names, seed, reg_order)
    rng = np.random.default_rng([seed, 3])
    shape = (config.embed_dim, len(class_names))
    weights = rng.uniform(0.0, 1.0, shape) * (rng.random(shape) < density)
    model.classifier = SparseClassifier(weights, reg_order, list(class_names))
    return model

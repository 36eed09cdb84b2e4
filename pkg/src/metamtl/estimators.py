"""Estimator-style wrappers with the scikit-learn fit/transform/predict
conventions, so the pipeline composes with that ecosystem (get_params powers
cloning and grid search; no scikit-learn import is required).
"""

from __future__ import annotations

import inspect

import numpy as np

from . import nn, taskgen, trainer
from .data import LabeledDataset
from .embedding import AutoencoderConfig, embed, train_autoencoder
from .errors import ParameterError
from .trainer import TrainConfig
from .validation import as_image_batch, check_array, check_is_fitted, check_X_y


class BaseEstimator:
    """Parameter introspection compatible with sklearn.base.clone."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p.name for p in sig.parameters.values() if p.name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ParameterError(f"invalid parameter {key!r} for "
                                     f"{type(self).__name__}")
            setattr(self, key, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"


def _scaled_unit(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def _to_dataset(x: np.ndarray, y=None, class_count: int = 2,
                name: str = "array") -> LabeledDataset:
    imgs = as_image_batch(x)
    if imgs.min() < 0.0 or imgs.max() > 1.0:
        imgs = _scaled_unit(imgs)
    return LabeledDataset(imgs, y, class_count, name)


class AutoencoderEmbedding(BaseEstimator):
    """Transformer mapping inputs to reconstruction-trained latent codes."""

    def __init__(self, latent_dim: int = 32, epochs: int = 20, batch_size: int = 64,
                 learning_rate: float = 0.05, momentum: float = 0.9, seed: int = 0):
        self.latent_dim = latent_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed
        self.autoencoder_ = None

    def _config(self) -> AutoencoderConfig:
        return AutoencoderConfig(latent_dim=self.latent_dim, epochs=self.epochs,
                                 batch_size=self.batch_size,
                                 learning_rate=self.learning_rate,
                                 momentum=self.momentum, seed=self.seed)

    def fit(self, X, y=None):
        data = _to_dataset(check_array(X))
        self.autoencoder_ = train_autoencoder(data, self._config())
        self.loss_curve_ = list(self.autoencoder_.epoch_losses)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "autoencoder_")
        data = _to_dataset(check_array(X))
        return embed(data, self.autoencoder_).rows

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit(X, y).transform(X)


class KMeansPartitioner(BaseEstimator):
    """Seeded Lloyd/k-means++ clustering with sklearn-style attributes."""

    def __init__(self, n_clusters: int = 8, max_iter: int = 300, tol: float = 1e-6,
                 seed: int = 0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed
        self.cluster_centers_ = None

    def fit(self, X, y=None):
        arr = check_array(X, allow_ndim=(2,))
        part = taskgen.kmeans(arr, self.n_clusters, max_iter=self.max_iter,
                              tol=self.tol, seed=self.seed)
        self.cluster_centers_ = part.centroids
        self.labels_ = part.assignments
        self.inertia_ = part.inertia
        self.n_iter_ = part.n_iter
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "cluster_centers_")
        arr = check_array(X, allow_ndim=(2,))
        d2 = ((arr[:, None, :] - self.cluster_centers_[None]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X, y).labels_


class _ClassifierCore(BaseEstimator):
    """Shared fit plumbing: label encoding, architecture and model building."""

    def _encode_labels(self, y):
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ParameterError("classification needs at least two classes")
        return np.searchsorted(self.classes_, y)

    def _arch_for(self, data: LabeledDataset):
        if self.arch == "toy_dense":
            return nn.arch_spec("toy_dense", data.input_shape, hidden=self.hidden)
        return nn.arch_spec(self.arch, data.input_shape)

    def _train_config(self, **overrides) -> TrainConfig:
        base = dict(alpha=self.alpha, episodes=self.episodes,
                    batch_size=self.batch_size, seed=self.seed)
        base.update(overrides)
        return TrainConfig(**base)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        imgs = as_image_batch(check_array(X))
        return self.classes_[trainer.predict(self.model_, imgs)]

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


class STLClassifier(_ClassifierCore):
    """Plain single-task SGD training of one encoder + one decoder."""

    def __init__(self, arch: str = "toy_dense", hidden: int = 32,
                 alpha: float = 0.1, episodes: int = 500, batch_size: int = 32,
                 seed: int = 0):
        self.arch = arch
        self.hidden = hidden
        self.alpha = alpha
        self.episodes = episodes
        self.batch_size = batch_size
        self.seed = seed
        self.model_ = None

    def fit(self, X, y):
        arr, labels = check_X_y(X, y)
        idx = self._encode_labels(labels)
        data = _to_dataset(arr, idx, len(self.classes_))
        model = nn.build(self._arch_for(data), [len(self.classes_)], self.seed)
        self.model_, self.logs_ = trainer.train_stl(model, data, self._train_config())
        return self


class _AuxTaskMixin:
    """Auxiliary-task construction from embeddings of (un)labeled inputs."""

    def _build_aux(self, data: LabeledDataset, embed_inputs: np.ndarray | None):
        source = data if embed_inputs is None else _to_dataset(embed_inputs)
        ae_cfg = AutoencoderConfig(latent_dim=self.latent_dim, epochs=self.ae_epochs,
                                   batch_size=self.batch_size,
                                   learning_rate=self.ae_learning_rate,
                                   seed=self.seed)
        self.autoencoder_ = train_autoencoder(source, ae_cfg)
        z = embed(source, self.autoencoder_)
        k = self.n_clusters or len(self.classes_)
        parts = taskgen.make_partitions(z, self.n_aux_tasks, k, self.transform,
                                        self.seed)
        self.partitions_ = parts
        return [taskgen.partition_to_task(p, source, task_id=i + 1)
                for i, p in enumerate(parts)]


class JointMTLClassifier(_ClassifierCore, _AuxTaskMixin):
    """Joint SGD over the main task and k-means pseudo-label tasks."""

    def __init__(self, arch: str = "toy_dense", hidden: int = 32,
                 n_aux_tasks: int = 4, n_clusters: int | None = None,
                 transform: str = "random_scaling", latent_dim: int = 16,
                 ae_epochs: int = 20, ae_learning_rate: float = 0.05,
                 alpha: float = 0.1, episodes: int = 500, batch_size: int = 32,
                 seed: int = 0):
        self.arch = arch
        self.hidden = hidden
        self.n_aux_tasks = n_aux_tasks
        self.n_clusters = n_clusters
        self.transform = transform
        self.latent_dim = latent_dim
        self.ae_epochs = ae_epochs
        self.ae_learning_rate = ae_learning_rate
        self.alpha = alpha
        self.episodes = episodes
        self.batch_size = batch_size
        self.seed = seed
        self.model_ = None

    def fit(self, X, y, X_unlabeled=None):
        arr, labels = check_X_y(X, y)
        idx = self._encode_labels(labels)
        data = _to_dataset(arr, idx, len(self.classes_))
        aux = self._build_aux(data, X_unlabeled)
        counts = [len(self.classes_)] + [a.num_classes for a in aux]
        model = nn.build(self._arch_for(data), counts, self.seed)
        self.model_, self.logs_ = trainer.train_mtl_joint(model, data, aux,
                                                          self._train_config())
        return self


class MetaMTLClassifier(_ClassifierCore, _AuxTaskMixin):
    """Episodic meta training of the shared encoder over pseudo-label tasks."""

    def __init__(self, arch: str = "toy_dense", hidden: int = 32,
                 n_aux_tasks: int = 4, n_clusters: int | None = None,
                 transform: str = "random_scaling", latent_dim: int = 16,
                 ae_epochs: int = 20, ae_learning_rate: float = 0.05,
                 alpha: float = 0.1, beta: float = 0.1, episodes: int = 500,
                 batch_size: int = 32, tasks_per_episode: int = 4,
                 meta_order: int = 2, hvp_mode: str = "exact", seed: int = 0):
        self.arch = arch
        self.hidden = hidden
        self.n_aux_tasks = n_aux_tasks
        self.n_clusters = n_clusters
        self.transform = transform
        self.latent_dim = latent_dim
        self.ae_epochs = ae_epochs
        self.ae_learning_rate = ae_learning_rate
        self.alpha = alpha
        self.beta = beta
        self.episodes = episodes
        self.batch_size = batch_size
        self.tasks_per_episode = tasks_per_episode
        self.meta_order = meta_order
        self.hvp_mode = hvp_mode
        self.seed = seed
        self.model_ = None

    def fit(self, X, y, X_unlabeled=None):
        arr, labels = check_X_y(X, y)
        idx = self._encode_labels(labels)
        data = _to_dataset(arr, idx, len(self.classes_))
        aux = self._build_aux(data, X_unlabeled)
        counts = [len(self.classes_)] + [a.num_classes for a in aux]
        model = nn.build(self._arch_for(data), counts, self.seed)
        cfg = self._train_config(
            beta=self.beta,
            tasks_per_episode=min(self.tasks_per_episode, 1 + len(aux)),
            meta_order=self.meta_order, hvp_mode=self.hvp_mode)
        self.model_, self.logs_ = trainer.train_meta_mtl(model, data, aux, cfg)
        return self

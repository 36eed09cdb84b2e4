"""Meta multi-task learning with k-means pseudo-task augmentation.

A small labeled task is boosted by auxiliary classification tasks built
from k-means clusterings of a learned embedding space; the shared encoder
is either trained jointly or meta-trained so that auxiliary updates must
help the main task.  Everything runs on a self-contained float64 autodiff
core with exact second-order support.
"""

import os as _os

# Cap BLAS worker pools before numpy loads its backend; the value is echoed
# into every run report for reproducibility.
_threads = _os.environ.get("MMTL_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from . import data, embedding, estimators, nn, taskgen, tensor, trainer  # noqa: E402
from .config import ExperimentConfig, load_config, save_config  # noqa: E402
from .data import LabeledDataset, SplitSpec, load_dset, load_mnist_idx, save_dset, \
    split, subsample_labeled, synth_blobs  # noqa: E402
from .embedding import AutoencoderConfig, EmbeddingMatrix, embed, \
    export_embeddings, import_embeddings, train_autoencoder  # noqa: E402
from .errors import (ComparisonError, ContractError, DataError, DivergenceError,
                     FormatError, ParameterError, ShapeError)  # noqa: E402
from .estimators import (AutoencoderEmbedding, JointMTLClassifier,
                         KMeansPartitioner, MetaMTLClassifier, STLClassifier)  # noqa: E402
from .nn import ArchSpec, ModelParams, arch_spec, build, forward, load_checkpoint, \
    param_count, save_checkpoint, shared_output  # noqa: E402
from .runner import RunReport, StageError, compare, load_report, probe, run  # noqa: E402
from .taskgen import (Partition, TaskDataset, TransformMode, cluster_nmi,
                      export_partition, kmeans, make_partitions,
                      partition_to_task, random_label_task, transform_embedding)  # noqa: E402
from .tensor import (GradMap, Graph, Tensor, backward, conv2d, conv_transpose2d,
                     dense, dropout, hvp, maxpool2d, no_grad, relu,
                     softmax_cross_entropy)  # noqa: E402
from .trainer import (BatchStreams, EpisodeLog, TrainConfig, evaluate,
                      meta_episode, meta_shared_gradient, train_meta_mtl,
                      train_mtl_joint, train_stl, write_episode_csv)  # noqa: E402

__version__ = "0.1.0"

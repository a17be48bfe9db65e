"""vamkit: attention-gated two-branch image embeddings with stochastic gating,
triplet training, synthetic cross-domain data, and top-k retrieval evaluation."""

from .data import (ArrayDataset, Dataset, DatasetManifest, ItemRecord, generate_dataset,
                   load_dataset, oracle_attention)
from .estimator import TripletEmbedder
from .gating import (area_downsample, check_attention_map, gate_forward_eval,
                     impdrop_backward_p, impdrop_backward_x, impdrop_forward_train,
                     impdrop_sample_mask, product_backward)
from .network import (EmbeddingNet, NetworkConfig, build_network, embed, load_checkpoint,
                      network_backward, save_checkpoint)
from .retrieval import (AblationReport, Gallery, RetrievalResult, build_gallery, evaluate,
                        run_ablation, topk_accuracy, topk_search)
from .seeding import derive_seed, make_rng
from .tensor import (Shape, ew_binary, read_tensor_blob, reduce_sum, tensor_new,
                     write_tensor_blob)
from .training import (GradcheckReport, TrainConfig, TrainResult, gradcheck, sgd_step, train)
from .triplet import (Triplet, sample_triplets_cross_domain, sample_triplets_inshop,
                      triplet_loss, triplet_loss_grad)

__version__ = "0.1.0"

__all__ = [
    "ArrayDataset", "Dataset", "DatasetManifest", "ItemRecord", "generate_dataset",
    "load_dataset", "oracle_attention", "TripletEmbedder", "area_downsample",
    "check_attention_map", "gate_forward_eval", "impdrop_backward_p", "impdrop_backward_x",
    "impdrop_forward_train", "impdrop_sample_mask", "product_backward", "EmbeddingNet",
    "NetworkConfig", "build_network", "embed", "load_checkpoint", "network_backward",
    "save_checkpoint", "AblationReport", "Gallery", "RetrievalResult", "build_gallery",
    "evaluate", "run_ablation", "topk_accuracy", "topk_search", "derive_seed", "make_rng",
    "Shape", "ew_binary", "read_tensor_blob", "reduce_sum", "tensor_new",
    "write_tensor_blob", "GradcheckReport", "TrainConfig", "TrainResult", "gradcheck",
    "sgd_step", "train", "Triplet", "sample_triplets_cross_domain",
    "sample_triplets_inshop", "triplet_loss", "triplet_loss_grad", "__version__",
]

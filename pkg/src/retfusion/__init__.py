"""Late-interaction multimodal retrieval with a gated recurrent fusion
encoder over multi-layer backbone features."""

from .cell import CellParams, CellStepOutput, candidate_state, cell_step, fuse_modality, gated_update
from .config import RunConfig, build_run_config, parse_config_file
from .encoder import (EncoderConfig, EncoderParams, GateTrace, LayerStack, encode,
                      gate_trace_summary, init_encoder_params, named_parameters,
                      run_encoder, select_layer_indices)
from .features import read_feature_file, write_feature_file
from .fixtures import FixtureSpec, gen_fixtures, load_manifest
from .index import RetrievalIndex
from .metrics import EvalRecord, pseudo_recall_at_k, recall_at_k
from .model import RetrievalModel, init_model, load_model, model_named_parameters, save_model
from .scoring import TokenMatrix, maxsim_graph, maxsim_score, score_matrix, symmetric_infonce
from .tensor import AttentionParams, Tape, Tensor, attention, parameter
from .training import (BatchItem, TrainState, grad_check, init_train_state,
                       train_step)

__version__ = "0.1.0"

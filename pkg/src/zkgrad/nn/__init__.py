from .model import (
    Concat,
    Dense,
    Embedding,
    LOSS_CROSS_ENTROPY,
    LOSS_MSE,
    ModelGraph,
    ModelTables,
    ReLU6,
    Softmax,
    TrainConfig,
    Weights,
    init_weights,
    recommender_model,
    weight_bytes,
)
from .ops import DirectOps, GridOps
from .train import (
    ForwardTrace,
    backward_fxp,
    batches_for_epoch,
    forward_fxp,
    mse_float,
    mse_fxp,
    run_sgd_step,
    sgd_step,
    train_float,
    train_fxp,
    float_params,
)
from .witness import (
    InferenceWitness,
    StepWitness,
    emit_inference_witness,
    emit_step_witness,
    inference_skeleton_json,
    step_skeleton_json,
    zero_weights,
)

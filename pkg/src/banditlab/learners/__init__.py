from .interpolators import (
    NearestNeighborPolicy,
    TabularLearner,
    TabularPolicy,
    TabularQ,
    UnsupportedError,
    finite_class_argmax,
    nearest_index,
    one_nn_bandit_policy,
    one_nn_full_policy,
    tabular_interpolator,
)
from .mlp import (
    LINEAR,
    SOFTMAX,
    LearningCurve,
    MlpLearner,
    MlpParams,
    MlpPolicy,
    MlpQ,
    TrainConfig,
    TrainingDiverged,
    as_policy,
    full_feedback_learner,
    grad_check,
    load_params,
    mlp_forward,
    params_dumps,
    save_params,
    sgd_train,
)

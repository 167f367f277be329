from apga.modeling.classifier import ReferenceClassifier
from apga.modeling.core import (
    AdamState,
    adam_step,
    backward,
    forward_classifier,
    forward_policy,
    named_params,
)
from apga.modeling.policy import MaskPolicy

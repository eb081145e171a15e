"""Stacked random forests mapped to deep sparse nets and back."""

from .activations import class_normalize, softmax
from .autocontext import ForestStack, LevelParams, StackConfig, stack_predict_image, train_stack
from .deepnet import (SparseNet, TrainConfig, backward, loss_and_grad, map_stack_to_net,
                      net_forward_image, train_sgd)
from .features import (FeatureStack, FilterBank, OffsetFeatureId, apply_filter_bank, lookup_offset,
                       normalize_channels)
from .forest import (DecisionTree, Forest, TreeParams, forest_predict, forest_predict_image,
                     train_forest, train_tree, tree_predict)
from .mapback import compute_z, map_back_1, map_back_2, remapped_predict_image
from .metrics import dice_class_balanced, pixel_accuracy_foreground
from .rf2nn import (INFERENCE_STRENGTHS, TRAINING_STRENGTHS, NetBlock, StrengthTriple,
                    block_forward, map_forest_to_block)

__version__ = "0.1.0"

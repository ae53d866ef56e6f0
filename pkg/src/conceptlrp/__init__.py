"""Layer-wise relevance propagation for small convolutional graphs, with
concept relevance (CRP), prototypical concept explanations (PCX) and a
feature-map perturbation benchmark."""
from .concepts import (ConceptVector, ReferenceSet, concept_vector, conditional_heatmap, conditional_relevance,
                       heatmap_rgb, input_heatmap, relmax_references, render_heatmap)
from .graph import (ForwardTape, Graph, GraphError, Node, TargetError, TargetSpec, backward_gradient, forward,
                    forward_from, load_model, save_model, select_scalar, validate)
from .lrp import (ConservationReport, Epsilon, GatedSignalTakeAll, Gamma, PassThrough, RelevanceTape, RuleAssignment,
                  RuleConfigError, ZPlus, lrp_backward, parse_rule)
from .pcx import (ConceptMatrix, GmmModel, assign, calibrate_outliers, cosine_similarity, difference_to_prototype,
                  fit_gmm, outlier_score, prototype_summary)
from .perturb import ScoreMethod, aoc, auc, channel_scores, deletion_curve, insertion_curve, run_benchmark
from .tensor import ChannelVector, ShapeError

__version__ = "0.1.0"

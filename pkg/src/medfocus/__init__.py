"""Concept-level causal attribution for medical vision-language models.

Anatomical concepts are transferred from annotated reference images onto a
target radiograph with entropic unbalanced optimal transport, removed one at
a time, and ranked by how much the model's own answer loses probability.
"""

from .core import BBox, VqaSample, load_image, save_image
from .transport import UotParams, build_distribution, solve_uot, transfer_region, select_reference
from .concepts import DEFAULT_VOCABULARY, ConceptVocabulary, ReferencePack, transfer_concepts
from .services import ModelClient, EditorClient, RefinerClient, ServiceError
from .scoring import WHOLE_IMAGE, AttributionConfig, attribute, explain
from .baselines import occlusion_map, rise_map, saliency_to_boxes
from .evaluation import score_boxes, evaluate
from .benchbuild import make_question, parse_answer, causal_filter, build_bench

__version__ = "0.1.0"

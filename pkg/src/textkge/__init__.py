"""Text-enhanced knowledge-graph embeddings with dense description retrieval.

Pipeline: load a triple graph and a description corpus, jointly train KG
embeddings, a text projection and the retrieval scoring, then evaluate on
link prediction, relation prediction and triplet classification.
"""

from .corpus import DescriptionCorpus, Description, load_corpus, read_vectors, synth_embed, write_corpus, write_vectors
from .errors import ConfigError, DataError, NumericalError
from .evaluation import EvalReport, link_prediction, metrics, rank_of, relation_prediction, triplet_classification
from .graph import KnowledgeGraph, NegativeSample, Triple, load_graph, sample_negatives, save_graph, stratify
from .models import EmbeddingState, init_embeddings, score, score_grad, triple_query
from .retriever import Projection, RetrievalResult, attention, doc_scores, fuse, project, similarity, top_k
from .trainer import Checkpoint, TrainConfig, joint_step, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

"""Desk-scale multimodal RAG simulator and hierarchical visual attack engine."""

from .attack import (AttackConfig, AttackTrace, Perturbation, baseline_caption_dissim,
                     baseline_random, generator_noise, hinge_contrastive_loss, hv_attack,
                     pgd_update, stage1_attack, stage2_attack)
from .corpus import Corpus, KnowledgeEntry, QuerySample, TrainParams, load_corpus, \
    save_corpus, synth_corpus, train_dual_encoder, train_encoder
from .evaluation import MetricReport, SweepSpec, asr_star, exact_match, precision_at_k, \
    recall_at_k, run_experiment, run_sweep
from .generation import Answer, PipelineRun, generate_answer, run_mrag
from .models import DualEncoder, caption_embed, encode_image, encode_text, loss_vjp, \
    multimodal_embed
from .numerics import SeededRng, clip_box, cosine_sim, dot, finite_diff_grad, sign_vec
from .retrieval import KnowledgeBase, RetrievalResult, build_kb, relevance, retrieve_topk, \
    select_reference_image, select_reference_passage

__version__ = "0.1.0"

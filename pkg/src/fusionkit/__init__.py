"""fusionkit: instruction-guided token selection and fusion for multi-view
driving features, plus the evaluation and data tooling around it.

Subpackages are deliberately flat:

- ``matrix``        dense float64 matrix container + FKMX/CSV on-disk formats
- ``numerics``      matmul, softmax, MLP, stacked cross-attention, gradients
- ``interactor``    relevance scoring, top-k selection, fusion, token budget
- ``text_metrics``  corpus BLEU / ROUGE-L / CIDEr / accuracy / MAE
- ``driving_eval``  box IoU + grounding mAP, open-loop L2 and collision, ORA
- ``refinery``      tagged-text grammar, box/decimal normalization, records
- ``chat``          minimal chat-completion client (HTTP + deterministic replay)
- ``risk_qa``       two-step risk extraction / QA generation pipeline
- ``masking``       seeded token-masking experiment harness
- ``cli``           the ``fusionkit`` command line tool
"""

__version__ = "0.1.0"

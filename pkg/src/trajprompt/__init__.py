"""Next-POI question-answering corpora from check-in logs.

Pipeline: ingest -> prompting -> embedding -> retrieval -> corpus -> inference -> evaluation.
"""

__version__ = "0.1.0"

"""Knowledge-graph conversational recommender: graph encoder, recommender, generator and evaluation."""

__version__ = "0.1.0"

"""Relevance-integrated large-scale inference: relevance functions, LASER sampling and customized fdr / EB."""

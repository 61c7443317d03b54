"""
Services package for the disentanglement toolkit
Attacks, model, losses, training, evaluation and data ingestion
"""

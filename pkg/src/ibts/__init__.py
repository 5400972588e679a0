"""Information-bottleneck saliency explanations for time-series classifiers."""
from .datagen import GeneratorConfig, TimeSeriesDataset, generate, load_dataset, save_dataset
from .classifier import ClassifierConfig, ClassifierModel, predict_proba, train_classifier
from .explainer import ExplainerConfig, explain, train_explainer

__version__ = "0.1.0"

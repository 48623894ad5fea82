//! Prior backends producing the prior projection of an observation.

mod dictionary;
mod gaussian;
mod generator;
mod inversion;

pub use dictionary::{fit_dictionary, project_dictionary, project_dictionary_observed, DictionaryPrior};
pub use gaussian::{gaussian_map_estimate, gaussian_phi, GaussianPixelPrior};
pub use generator::{compose, pretrain_autoencoder, GeneratorArch, MultiCodeGenerator, PretrainConfig};
pub use inversion::{
    inversion_objective, invert, observation_loss, InversionConfig, InversionResult, LossWeights, ObjectiveEval,
    INVERSION_PRESETS,
};

/// One of the three prior families.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorBackend {
    /// Projection-free: the prior image is the mean `x̄`.
    Gaussian(GaussianPixelPrior),
    Dictionary {
        prior: DictionaryPrior,
        topk: Option<usize>,
    },
    Generator {
        generator: MultiCodeGenerator,
        config: InversionConfig,
    },
}

impl PriorBackend {
    pub fn name(&self) -> &'static str {
        match self {
            PriorBackend::Gaussian(_) => "gaussian",
            PriorBackend::Dictionary { .. } => "dictionary",
            PriorBackend::Generator { .. } => "generator",
        }
    }
}

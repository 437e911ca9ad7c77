use serde::{Deserialize, Serialize};

macro_rules! sense_enum {
    ($name:ident { $($variant:ident => $token:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn token(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }

            pub fn from_token(token: &str) -> Option<Self> {
                match token {
                    $($token => Some($name::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

sense_enum!(Vision {
    AppleDelicious => "VIS_APPLE_DELICIOUS",
    BananaDelicious => "VIS_BANANA_DELICIOUS",
    AppleGreen => "VIS_APPLE_GREEN",
    BananaSpotted => "VIS_BANANA_SPOTTED",
});

sense_enum!(Inference {
    AppleTasty => "INF_APPLE_TASTY",
    BananaTasty => "INF_BANANA_TASTY",
    AppleUntasty => "INF_APPLE_UNTASTY",
    BananaUntasty => "INF_BANANA_UNTASTY",
});

sense_enum!(Taste {
    None => "TASTE_NONE",
    Apple => "TASTE_APPLE",
    Banana => "TASTE_BANANA",
});

sense_enum!(Hunger {
    Hungry => "HUNGRY",
    NotHungry => "NOT_HUNGRY",
});

sense_enum!(Desire {
    None => "DESIRE_NONE",
    Apple => "DESIRE_APPLE",
    Banana => "DESIRE_BANANA",
});

impl Vision {
    /// The taste a child infers from what it sees.
    pub fn inferred_taste(self) -> Inference {
        match self {
            Vision::AppleDelicious => Inference::AppleTasty,
            Vision::BananaDelicious => Inference::BananaTasty,
            Vision::AppleGreen => Inference::AppleUntasty,
            Vision::BananaSpotted => Inference::BananaUntasty,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Inference,
    Taste,
    Hunger,
    Desire,
}

impl Modality {
    /// Input order of the sense positions.
    pub const ALL: [Modality; 5] = [
        Modality::Vision,
        Modality::Inference,
        Modality::Taste,
        Modality::Hunger,
        Modality::Desire,
    ];

    pub fn tokens(self) -> Vec<&'static str> {
        match self {
            Modality::Vision => Vision::ALL.iter().map(|v| v.token()).collect(),
            Modality::Inference => Inference::ALL.iter().map(|v| v.token()).collect(),
            Modality::Taste => Taste::ALL.iter().map(|v| v.token()).collect(),
            Modality::Hunger => Hunger::ALL.iter().map(|v| v.token()).collect(),
            Modality::Desire => Desire::ALL.iter().map(|v| v.token()).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Inference => "inference",
            Modality::Taste => "taste",
            Modality::Hunger => "hunger",
            Modality::Desire => "desire",
        }
    }
}

/// What the child perceives at the current moment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SenseState {
    pub vision: Vision,
    pub inference: Inference,
    pub taste: Taste,
    pub hunger: Hunger,
    pub desire: Desire,
}

impl SenseState {
    pub fn token(&self, modality: Modality) -> &'static str {
        match modality {
            Modality::Vision => self.vision.token(),
            Modality::Inference => self.inference.token(),
            Modality::Taste => self.taste.token(),
            Modality::Hunger => self.hunger.token(),
            Modality::Desire => self.desire.token(),
        }
    }

    pub fn tokens(&self) -> [&'static str; 5] {
        Modality::ALL.map(|m| self.token(m))
    }

    /// Every combination of sense values, valid or not, in modality order.
    pub fn all_combinations() -> Vec<SenseState> {
        let mut out = Vec::new();
        for &vision in Vision::ALL {
            for &inference in Inference::ALL {
                for &taste in Taste::ALL {
                    for &hunger in Hunger::ALL {
                        for &desire in Desire::ALL {
                            out.push(SenseState {
                                vision,
                                inference,
                                taste,
                                hunger,
                                desire,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_tokens(tokens: [&str; 5]) -> Option<SenseState> {
        Some(SenseState {
            vision: Vision::from_token(tokens[0])?,
            inference: Inference::from_token(tokens[1])?,
            taste: Taste::from_token(tokens[2])?,
            hunger: Hunger::from_token(tokens[3])?,
            desire: Desire::from_token(tokens[4])?,
        })
    }
}

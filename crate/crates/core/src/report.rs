//! Serializable audit trail for model and data selection.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data_select::DataSelection;
use crate::model_select::ExpertSelection;

/// Everything needed to reproduce and audit one selection run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experts: Option<ExpertSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSelection>,
}

impl SelectionReport {
    /// Ids of the chosen experts, if model selection ran.
    pub fn chosen_experts(&self) -> Option<&[String]> {
        self.experts.as_ref().map(|e| e.chosen.as_slice())
    }

    /// Ids of the augmentation set, if data selection ran.
    pub fn selected_data(&self) -> Option<Vec<&str>> {
        self.data
            .as_ref()
            .map(|d| d.selected.iter().map(|s| s.id.as_str()).collect())
    }
}

/// Serde adapter for reals that may hold the `+inf` sentinel. Finite
/// values are plain JSON numbers; infinities become the strings `"inf"` /
/// `"-inf"`.
pub mod extended_real {
    use core::fmt;

    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = f64;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v {
                    "inf" | "+inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

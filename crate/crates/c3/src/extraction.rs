//! Attribute extraction through the gateway.

use c3_core::attributes::{parse_attribute_list, Attribute, Modality};

use crate::gateway::{Chat, ChatMessage, ChatRequest, GatewayError};
use crate::templates::{render, PromptTemplate};

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub attributes: Vec<Attribute>,
    /// Set when the reply yielded no attributes.
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExtractSettings<'a> {
    pub model_id: &'a str,
    pub max_tokens: u32,
    /// Maximum attributes kept per modality.
    pub cap: usize,
}

/// Asks the model for the attributes of one modality and parses the reply.
///
/// For [`Modality::Image`], `input` is the image reference and is attached
/// to the request; for [`Modality::Text`] it is the caption.
pub fn extract_attributes(
    sample_id: &str,
    input: &str,
    modality: Modality,
    chat: &dyn Chat,
    template: &PromptTemplate,
    settings: &ExtractSettings<'_>,
) -> Result<Extraction, GatewayError> {
    let user = render(&template.user, &[("input", input)]);
    let mut user = ChatMessage::user(user);
    let tag = match modality {
        Modality::Image => {
            user = user.with_image(input);
            "extract:image"
        }
        Modality::Text => "extract:text",
    };
    let mut messages = Vec::new();
    if !template.system.is_empty() {
        messages.push(ChatMessage::system(template.system.clone()));
    }
    messages.push(user);
    let req = ChatRequest {
        model_id: settings.model_id.to_string(),
        messages,
        temperature: 0.0,
        max_tokens: settings.max_tokens,
        request_tag: format!("{sample_id}:{tag}"),
    };
    let reply = chat.chat(&req)?;
    let attributes = parse_attribute_list(&reply.content, modality, settings.cap);
    let warning = attributes.is_empty().then(|| {
        let w = format!("{sample_id}: {tag} produced no attributes");
        log::warn!("{w}");
        w
    });
    Ok(Extraction { attributes, warning })
}

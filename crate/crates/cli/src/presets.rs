//! Shipped experiment presets, embedded at build time.

pub const FIVE_WAY_DESK: &str = include_str!("../presets/five_way_desk.toml");
pub const FIVE_WAY_ONEBIT_DESK: &str = include_str!("../presets/five_way_onebit_desk.toml");

/// `(name, description, toml)` for every shipped preset.
pub fn all() -> &'static [(&'static str, &'static str, &'static str)] {
    &[
        (
            "five-way-desk",
            "all five algorithms, paired seeds, noisy quadratic, top-k flavor",
            FIVE_WAY_DESK,
        ),
        (
            "five-way-onebit-desk",
            "all five algorithms, paired seeds, noisy quadratic, 1-bit flavor",
            FIVE_WAY_ONEBIT_DESK,
        ),
    ]
}

pub fn by_name(name: &str) -> Option<&'static str> {
    all()
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, _, text)| *text)
}

/// The 21 standard sections. Position in this list is the label index.
pub const CLASSES: [(&str, &str); 21] = [
    ("3VT", "Three Vessel Tracheal View"),
    ("BL", "Bladder Axial View"),
    ("4C", "Four-Chamber View"),
    ("TV", "Transventricular View"),
    ("UR", "Ulna and Radius Coronal View"),
    ("HL", "Humerus Long Axis View"),
    ("ICO", "Internal Cervical Os Sagittal View"),
    ("FL", "Femur Long Axis View"),
    ("CTSP", "Cervicothoracic Spine Sagittal View"),
    ("TF", "Tibia and Fibula Coronal View"),
    ("CI", "Cord Insertion Abdominal Axial View"),
    ("TTV", "Transthalamic View"),
    ("DI", "Diaphragm Coronal View"),
    ("Ab", "Upper Abdomen Axial View"),
    ("LVOT", "Left Ventricular Outflow Tract"),
    ("Kidneys", "Kidneys Axial View"),
    ("Eyes", "Eye Axial View"),
    ("TCV", "Transcerebellar View"),
    ("MFP", "Median Sagittal Facial Profile View"),
    ("LSSP", "Lumbosacral Spine Sagittal View"),
    ("RVOT", "Right Ventricular Outflow Tract"),
];

pub const NUM_CLASSES: usize = CLASSES.len();

pub fn abbreviation(label: usize) -> Option<&'static str> {
    CLASSES.get(label).map(|c| c.0)
}

pub fn full_name(label: usize) -> Option<&'static str> {
    CLASSES.get(label).map(|c| c.1)
}

pub fn label_of(abbreviation: &str) -> Option<usize> {
    CLASSES.iter().position(|c| c.0 == abbreviation)
}

/// Abbreviations of the first `n` classes, as owned strings.
pub fn abbreviations(n: usize) -> Vec<String> {
    CLASSES.iter().take(n).map(|c| c.0.to_string()).collect()
}

use odil_py::{adapt_samples, schedule, tensor};

#[test]
fn schedule_presets_by_name() {
    assert_eq!(schedule("standard", 4).unwrap(), odil::MomentumSchedule::standard(4));
    assert_eq!(schedule("decaying", 4).unwrap(), odil::MomentumSchedule::decaying(4));
    assert!(schedule("rising", 4).is_err());
}

#[test]
fn batch_splits_into_labelled_samples() {
    let x = tensor((0..12).map(f64::from).collect(), vec![3, 1, 2, 2]).unwrap();
    let samples = adapt_samples(&x, Some(vec![2, 0, 1])).unwrap();
    assert_eq!(samples.len(), 3);
    assert_eq!(samples[1].input.shape(), &[1, 2, 2]);
    assert_eq!(samples[1].input.data(), &[4.0, 5.0, 6.0, 7.0]);
    assert_eq!(samples[2].label, Some(1));
    assert!(adapt_samples(&x, None).unwrap().iter().all(|s| s.label.is_none()));
    assert!(adapt_samples(&x, Some(vec![0])).is_err());
    assert!(tensor(vec![1.0; 5], vec![2, 2]).is_err());
}

/** Wire types mirroring the fishgrade/1 report schema. */

export type NucleusClassName = 'Artifact' | 'Background' | 'Normal' | 'LowAmp' | 'HighAmp';
export type StatusName = 'Negative' | 'PositiveLow' | 'PositiveHigh' | 'Indeterminate';
export type SignalClassName = 'HER2' | 'HER2Cluster' | 'CEP17';
export type OverrideAction = 'set_class' | 'exclude' | 'include';

export interface PolygonWire {
  center: [number, number];
  distances: number[];
  score: number;
}

export interface SignalWire {
  class: SignalClassName;
  box: [number, number, number, number];
  score: number;
}

export interface OverrideWire {
  action: OverrideAction;
  class?: NucleusClassName;
  by?: string;
  at?: string;
}

export interface NucleusWire {
  id: number;
  polygon: PolygonWire;
  crop_offset: [number, number];
  crop_size: [number, number];
  classifier: {
    source: string;
    class: NucleusClassName;
    rationale: string | null;
    probabilities: number[] | null;
  };
  signals: SignalWire[];
  signal_class: NucleusClassName | null;
  second_opinion: { status: 'consistent' | 'discrepant'; classes: [NucleusClassName, NucleusClassName] } | null;
  score: {
    her2_copies: number;
    cep17_copies: number;
    ratio: number | null;
    evaluable: boolean;
    exclusion_reason: string | null;
  };
  cam: number[][] | null;
  cam_reason: string | null;
  override: OverrideWire | null;
}

export interface SlideStatusWire {
  status: StatusName;
  evaluable_count: number;
  mean_ratio: number | null;
  mean_her2_copies: number | null;
}

export interface ScoringConfigWire {
  ratio_threshold: number;
  high_amp_mean_her2_copies: number;
  min_evaluable_nuclei: number;
  cluster_copies_floor: number;
  cluster_copies_cap: number;
  include_discrepant: boolean;
}

export interface SlideReportWire {
  schema: string;
  tool_version: string;
  created_at: string;
  slide: { width: number; height: number; input_sha256: string };
  config: { scoring: ScoringConfigWire } & Record<string, unknown>;
  nuclei: NucleusWire[];
  status: SlideStatusWire;
  metrics: unknown;
}

/** Effective class after any reviewer set_class override. */
export function effectiveClass(n: NucleusWire): NucleusClassName {
  if (n.override && n.override.action === 'set_class' && n.override.class) {
    return n.override.class;
  }
  return n.classifier.class;
}
